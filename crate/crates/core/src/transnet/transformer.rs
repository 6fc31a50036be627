//! Patch-token Transformer encoder over (1, 8, 8) patches of the raw volume.

use h3d_tensor::layers::{LayerNorm, Linear, WeightInit};
use h3d_tensor::{Float, Graph, Init, ParamBuilder, ParamId, Var};

pub const PATCH: usize = 8;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, mlp_ratio: usize) -> Self {
        let mut pb = pb.sub(name);
        let lin = WeightInit::Kaiming { gain: 0.5f64.sqrt() };
        Self {
            norm1: LayerNorm::new(&mut pb, "norm1", d),
            qkv: Linear::new(&mut pb, "qkv", d, 3 * d, lin),
            proj: Linear::new(&mut pb, "proj", d, d, lin),
            norm2: LayerNorm::new(&mut pb, "norm2", d),
            fc1: Linear::new(&mut pb, "fc1", d, mlp_ratio * d, lin),
            fc2: Linear::new(&mut pb, "fc2", mlp_ratio * d, d, lin),
        }
    }

    fn attention<T: Float>(&self, g: &Graph<'_, T>, x: Var, heads: usize) -> Var {
        let s = g.shape(x);
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let qkv = self.qkv.forward(g, x);
        let split = |i: usize| {
            let t = g.reshape(g.narrow(qkv, 2, i * d, d), &[b, n, heads, dh]);
            g.reshape(g.permute(t, &[0, 2, 1, 3]), &[b * heads, n, dh])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let scores = g.mul_scalar(g.matmul_t(q, k, false, true), 1.0 / (dh as f64).sqrt());
        let ctx = g.matmul(g.softmax_last(scores), v);
        let ctx = g.permute(g.reshape(ctx, &[b, heads, n, dh]), &[0, 2, 1, 3]);
        self.proj.forward(g, g.reshape(ctx, &[b, n, d]))
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var, heads: usize) -> Var {
        let x = g.add(x, self.attention(g, self.norm1.forward(g, x), heads));
        let h = g.gelu(self.fc1.forward(g, self.norm2.forward(g, x)));
        g.add(x, self.fc2.forward(g, h))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub embed: Linear,
    /// Learned positional table, (N, d).
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub heads: usize,
    pub tokens: usize,
}

impl TransformerEncoder {
    /// `grid` is the token grid (D, H/8, W/8).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        grid: [usize; 3],
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        layers: usize,
        out_channels: usize,
    ) -> Self {
        let mut pb = pb.sub("transformer");
        let tokens = grid.iter().product();
        Self {
            embed: Linear::new(&mut pb, "embed", PATCH * PATCH, d, WeightInit::Kaiming { gain: 0.5f64.sqrt() }),
            pos: pb.param("pos", &[tokens, d], Init::Normal { std: 0.02 }),
            layers: (0..layers).map(|i| EncoderLayer::new(&mut pb, &format!("layer{i}"), d, mlp_ratio)).collect(),
            norm: LayerNorm::new(&mut pb, "norm", d),
            out: Linear::new(&mut pb, "out", d, out_channels, WeightInit::Kaiming { gain: 0.5f64.sqrt() }),
            heads,
            tokens,
        }
    }

    /// Runs the encoder layers and final norm on already embedded tokens (B, N, d).
    pub fn forward_tokens<T: Float>(&self, g: &Graph<'_, T>, mut z: Var) -> Var {
        for layer in &self.layers {
            z = layer.forward(g, z, self.heads);
        }
        self.norm.forward(g, z)
    }

    /// Embedding plus positional table: `x_p E + E_pos`.
    pub fn embed_tokens<T: Float>(&self, g: &Graph<'_, T>, patches: Var) -> Var {
        let pos = g.param(self.pos);
        let ps = g.shape(pos);
        g.add(self.embed.forward(g, patches), g.reshape(pos, &[1, ps[0], ps[1]]))
    }

    /// (B, 1, D, H, W) → (B, C, D, H/8, W/8).
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let s = g.shape(x);
        let grid = [s[2], s[3] / PATCH, s[4] / PATCH];
        let z = self.forward_tokens(g, self.embed_tokens(g, patchify(g, x)));
        unpatchify(g, self.out.forward(g, z), grid)
    }
}

/// (B, C, D, H, W) → (B, N, C·64), tokens ordered depth-major then row-major.
pub fn patchify<T: Float>(g: &Graph<'_, T>, x: Var) -> Var {
    let s = g.shape(x);
    let (b, c, d, hp, wp) = (s[0], s[1], s[2], s[3] / PATCH, s[4] / PATCH);
    let t = g.reshape(x, &[b, c, d, hp, PATCH, wp, PATCH]);
    let t = g.permute(t, &[0, 2, 3, 5, 1, 4, 6]);
    g.reshape(t, &[b, d * hp * wp, c * PATCH * PATCH])
}

/// (B, N, C) → (B, C, D, Hp, Wp); inverse of the token ordering used by [`patchify`].
pub fn unpatchify<T: Float>(g: &Graph<'_, T>, tokens: Var, grid: [usize; 3]) -> Var {
    let s = g.shape(tokens);
    let t = g.reshape(tokens, &[s[0], grid[0], grid[1], grid[2], s[2]]);
    g.permute(t, &[0, 4, 1, 2, 3])
}
