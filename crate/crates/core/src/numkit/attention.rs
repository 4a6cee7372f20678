//! Pre-norm transformer block: `y = x + MHA(LN(x))`, `z = y + MLP(LN(y))`.

use super::layers::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, softmax_backward, softmax_rows, LayerNormCache, Linear,
};
use super::params::{init_layer_norm, init_linear, LayerParams, ParamGrads};
use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

const LINEARS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"];

/// Fresh block parameters for width `d`; MLP hidden width is `4d`.
pub fn init_block<T: Scalar>(name: &str, d: usize, trainable: bool, rng: &mut Rng) -> LayerParams<T> {
    let mut p = LayerParams::new(name, trainable);
    init_layer_norm(&mut p, "ln1", d);
    init_linear(&mut p, "attn.q", d, d, rng);
    init_linear(&mut p, "attn.k", d, d, rng);
    init_linear(&mut p, "attn.v", d, d, rng);
    init_linear(&mut p, "attn.o", d, d, rng);
    init_layer_norm(&mut p, "ln2", d);
    init_linear(&mut p, "mlp.fc1", d, 4 * d, rng);
    init_linear(&mut p, "mlp.fc2", 4 * d, d, rng);
    p
}

/// Resolved view of a block's parameters.
pub struct AttentionBlock<'a, T> {
    ln1: (&'a Tensor<T>, &'a Tensor<T>),
    ln2: (&'a Tensor<T>, &'a Tensor<T>),
    q: Linear<'a, T>,
    k: Linear<'a, T>,
    v: Linear<'a, T>,
    o: Linear<'a, T>,
    fc1: Linear<'a, T>,
    fc2: Linear<'a, T>,
    heads: usize,
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub input: Tensor<T>,
    pub output: Tensor<T>,
    /// Attention weights, one `T × T` matrix per head.
    pub attn: Vec<Tensor<T>>,
    ln1: LayerNormCache<T>,
    h1: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    ctx: Tensor<T>,
    ln2: LayerNormCache<T>,
    h2: Tensor<T>,
    f1: Tensor<T>,
    g: Tensor<T>,
}

impl<'a, T: Scalar> AttentionBlock<'a, T> {
    pub fn new(p: &'a LayerParams<T>, heads: usize) -> Result<Self> {
        let d = p.get("ln1.gamma")?.len();
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: (p.get("ln1.gamma")?, p.get("ln1.beta")?),
            ln2: (p.get("ln2.gamma")?, p.get("ln2.beta")?),
            q: Linear::from_params(p, "attn.q")?,
            k: Linear::from_params(p, "attn.k")?,
            v: Linear::from_params(p, "attn.v")?,
            o: Linear::from_params(p, "attn.o")?,
            fc1: Linear::from_params(p, "mlp.fc1")?,
            fc2: Linear::from_params(p, "mlp.fc2")?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<BlockTrace<T>> {
        let d = x.cols();
        let dh = d / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());

        let (h1, ln1) = layer_norm(self.ln1.0, self.ln1.1, x)?;
        let q = self.q.forward(&h1)?;
        let k = self.k.forward(&h1)?;
        let v = self.v.forward(&h1)?;
        let mut ctx = Tensor::zeros(x.rows(), d);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.slice_cols(h * dh, (h + 1) * dh),
                k.slice_cols(h * dh, (h + 1) * dh),
                v.slice_cols(h * dh, (h + 1) * dh),
            );
            let a = softmax_rows(&qh.matmul_t(&kh)?.scale(scale));
            ctx.set_cols(h * dh, &a.matmul(&vh)?);
            attn.push(a);
        }
        let mut y = self.o.forward(&ctx)?;
        y.add_assign(x)?;

        let (h2, ln2) = layer_norm(self.ln2.0, self.ln2.1, &y)?;
        let f1 = self.fc1.forward(&h2)?;
        let g = gelu(&f1);
        let mut z = self.fc2.forward(&g)?;
        z.add_assign(&y)?;

        Ok(BlockTrace {
            input: x.clone(),
            output: z,
            attn,
            ln1,
            h1,
            q,
            k,
            v,
            ctx,
            ln2,
            h2,
            f1,
            g,
        })
    }

    /// Gradient with respect to the block input; parameter gradients are
    /// computed only when `want_params` is set.
    pub fn backward(
        &self,
        trace: &BlockTrace<T>,
        grad_out: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Tensor<T>, Option<ParamGrads<T>>)> {
        let d = trace.input.cols();
        let dh = d / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut grads = ParamGrads::new();

        // MLP branch
        let (gg, g_fc2) = self.fc2.backward(&trace.g, grad_out, want_params)?;
        let gf1 = gelu_backward(&trace.f1, &gg);
        let (gh2, g_fc1) = self.fc1.backward(&trace.h2, &gf1, want_params)?;
        let (mut gy, g_ln2) = layer_norm_backward(self.ln2.0, &trace.ln2, &gh2, want_params);
        gy.add_assign(grad_out)?;

        // attention branch
        let (gctx, g_o) = self.o.backward(&trace.ctx, &gy, want_params)?;
        let rows = trace.input.rows();
        let mut gq = Tensor::zeros(rows, d);
        let mut gk = Tensor::zeros(rows, d);
        let mut gv = Tensor::zeros(rows, d);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let a = &trace.attn[h];
            let gctx_h = gctx.slice_cols(lo, hi);
            let vh = trace.v.slice_cols(lo, hi);
            let ga = gctx_h.matmul_t(&vh)?;
            gv.set_cols(lo, &a.t_matmul(&gctx_h)?);
            let gs = softmax_backward(a, &ga).scale(scale);
            gq.set_cols(lo, &gs.matmul(&trace.k.slice_cols(lo, hi))?);
            gk.set_cols(lo, &gs.t_matmul(&trace.q.slice_cols(lo, hi))?);
        }
        let (mut gh1, g_q) = self.q.backward(&trace.h1, &gq, want_params)?;
        let (gh1k, g_k) = self.k.backward(&trace.h1, &gk, want_params)?;
        let (gh1v, g_v) = self.v.backward(&trace.h1, &gv, want_params)?;
        gh1.add_assign(&gh1k)?;
        gh1.add_assign(&gh1v)?;
        let (mut gx, g_ln1) = layer_norm_backward(self.ln1.0, &trace.ln1, &gh1, want_params);
        gx.add_assign(&gy)?;

        if !want_params {
            return Ok((gx, None));
        }
        let linear_grads = [g_q, g_k, g_v, g_o, g_fc1, g_fc2];
        for (prefix, g) in LINEARS.iter().zip(linear_grads) {
            g.expect("requested").store(prefix, &mut grads, true);
        }
        for (prefix, g) in [("ln1", g_ln1), ("ln2", g_ln2)] {
            let (gamma, beta) = g.expect("requested");
            grads.insert(format!("{prefix}.gamma"), gamma);
            grads.insert(format!("{prefix}.beta"), beta);
        }
        Ok((gx, Some(grads)))
    }
}

/// One block forward: output sequence plus per-head attention weights.
pub fn attention_block<T: Scalar>(
    params: &LayerParams<T>,
    heads: usize,
    seq: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let trace = AttentionBlock::new(params, heads)?.forward(seq)?;
    Ok((trace.output, trace.attn))
}
