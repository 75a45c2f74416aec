//! Hand-written reverse pass for [`run_sequence`](super::forward::run_sequence).

use super::config::ModelConfig;
use super::forward::{BlockCache, ExitState, SequenceRun};
use super::ops::{rms_norm_rows_backward, silu, silu_grad, Rope};
use super::params::{BlockParams, Parameters};
use crate::tensor::{add_assign, gemm, matmul, matmul_acc, MatMut, MatRef, Scalar, Tensor};

/// Gradient of one exit branch (final norm + head) given `d logits`.
/// Accumulates into `dnorm`/`dhead` and returns `d pre`.
pub(crate) fn exit_backward<T: Scalar>(
    cfg: &ModelConfig,
    final_norm: &Tensor<T>,
    head: &Tensor<T>,
    ex: &ExitState<T>,
    dlogits: &[T],
    dnorm: &mut [T],
    dhead: &mut [T],
) -> Vec<T> {
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let s = ex.pre.len() / d;
    let dl = MatRef::new(dlogits, s, v);
    matmul_acc(MatRef::new(&ex.post, s, d).t(), dl, dhead);
    let dpost = matmul(dl, head.mat().t());
    let mut dpre = vec![T::zero(); s * d];
    rms_norm_rows_backward(&dpost, &ex.pre, &ex.inv, final_norm.data(), d, &mut dpre, dnorm);
    dpre
}

fn block_backward<T: Scalar>(
    bp: &BlockParams<T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    c: &BlockCache<T>,
    dout: Vec<T>,
    g: &mut BlockParams<T>,
) -> Vec<T> {
    let (d, f, nh) = (cfg.d_model, cfg.ffn_hidden, cfg.n_heads);
    let hd = cfg.head_dim();
    let s = c.input.len() / d;
    let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());

    // out = mid + act · w_down
    let dout_m = MatRef::new(&dout, s, d);
    matmul_acc(MatRef::new(&c.act, s, f).t(), dout_m, g.w_down.data_mut());
    let dact = matmul(dout_m, bp.w_down.mat().t());
    let mut dgate = vec![T::zero(); s * f];
    let mut dup = vec![T::zero(); s * f];
    for i in 0..s * f {
        let gt = c.gate[i];
        dgate[i] = dact[i] * c.up[i] * silu_grad(gt);
        dup[i] = dact[i] * silu(gt);
    }
    let xf = MatRef::new(&c.ffn_in, s, d);
    matmul_acc(xf.t(), MatRef::new(&dgate, s, f), g.w_gate.data_mut());
    matmul_acc(xf.t(), MatRef::new(&dup, s, f), g.w_up.data_mut());
    let mut dxf = matmul(MatRef::new(&dgate, s, f), bp.w_gate.mat().t());
    matmul_acc(MatRef::new(&dup, s, f), bp.w_up.mat().t(), &mut dxf);
    let mut dmid = dout;
    rms_norm_rows_backward(
        &dxf,
        &c.mid,
        &c.ffn_inv,
        bp.ffn_norm.data(),
        d,
        &mut dmid,
        g.ffn_norm.data_mut(),
    );

    // mid = input + ctx · wo
    let dmid_m = MatRef::new(&dmid, s, d);
    matmul_acc(MatRef::new(&c.ctx, s, d).t(), dmid_m, g.wo.data_mut());
    let dctx = matmul(dmid_m, bp.wo.mat().t());

    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dv = vec![T::zero(); s * d];
    let mut dp = vec![T::zero(); s * s];
    for head in 0..nh {
        let c0 = head * hd;
        let p = &c.probs[head * s * s..(head + 1) * s * s];
        let pm = MatRef::new(p, s, s);
        let dctx_h = MatRef::columns(&dctx, s, d, c0, hd);
        let vh = MatRef::columns(&c.v, s, d, c0, hd);
        gemm(T::one(), dctx_h, vh.t(), T::zero(), MatMut::new(&mut dp, s, s));
        gemm(
            T::one(),
            pm.t(),
            dctx_h,
            T::zero(),
            MatMut::columns(&mut dv, s, d, c0, hd),
        );
        // softmax backward; masked entries have p = 0 and drop out.
        for i in 0..s {
            let pr = &p[i * s..(i + 1) * s];
            let dr = &mut dp[i * s..(i + 1) * s];
            let dot = (0..=i).fold(T::zero(), |acc, j| acc + pr[j] * dr[j]);
            for j in 0..s {
                dr[j] = if j <= i {
                    pr[j] * (dr[j] - dot) * scale
                } else {
                    T::zero()
                };
            }
        }
        let ds = MatRef::new(&dp, s, s);
        let qh = MatRef::columns(&c.q, s, d, c0, hd);
        let kh = MatRef::columns(&c.k, s, d, c0, hd);
        gemm(T::one(), ds, kh, T::zero(), MatMut::columns(&mut dq, s, d, c0, hd));
        gemm(T::one(), ds.t(), qh, T::zero(), MatMut::columns(&mut dk, s, d, c0, hd));
    }
    rope.apply(&mut dq, s, d, true);
    rope.apply(&mut dk, s, d, true);

    let xa = MatRef::new(&c.attn_in, s, d);
    matmul_acc(xa.t(), MatRef::new(&dq, s, d), g.wq.data_mut());
    matmul_acc(xa.t(), MatRef::new(&dk, s, d), g.wk.data_mut());
    matmul_acc(xa.t(), MatRef::new(&dv, s, d), g.wv.data_mut());
    let mut dxa = matmul(MatRef::new(&dq, s, d), bp.wq.mat().t());
    matmul_acc(MatRef::new(&dk, s, d), bp.wk.mat().t(), &mut dxa);
    matmul_acc(MatRef::new(&dv, s, d), bp.wv.mat().t(), &mut dxa);

    let mut dh = dmid;
    rms_norm_rows_backward(
        &dxa,
        &c.input,
        &c.attn_inv,
        bp.attn_norm.data(),
        d,
        &mut dh,
        g.attn_norm.data_mut(),
    );
    dh
}

/// Accumulates `∂L/∂θ` into `grads` for a run that kept its block caches.
///
/// `dlogits[i]` is the gradient for `run.exits[i]`, or `None` for exits that
/// carry no loss (zero weight); those branches are skipped entirely. Every
/// exit reads the shared final norm and head.
pub(crate) fn backward_sequence<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    run: &SequenceRun<T>,
    dlogits: &[Option<Vec<T>>],
    grads: &mut Parameters<T>,
) {
    let cfg = &params.config;
    let (s, d) = (run.len, cfg.d_model);
    assert_eq!(run.blocks.len(), run.exits.last().map_or(0, |e| e.depth));
    let rope = Rope::new(s, cfg.head_dim(), cfg.rope_base);

    let deepest = run
        .exits
        .iter()
        .zip(dlogits)
        .filter(|(_, g)| g.is_some())
        .map(|(e, _)| e.depth)
        .max();
    let Some(deepest) = deepest else { return };

    let mut dh = vec![T::zero(); s * d];
    for depth in (1..=deepest).rev() {
        for (ex, dl) in run.exits.iter().zip(dlogits) {
            if ex.depth != depth {
                continue;
            }
            if let Some(dl) = dl {
                let dpre = exit_backward(
                    cfg,
                    &params.final_norm,
                    &params.head,
                    ex,
                    dl,
                    grads.final_norm.data_mut(),
                    grads.head.data_mut(),
                );
                add_assign(&mut dh, &dpre);
            }
        }
        dh = block_backward(
            &params.blocks[depth - 1],
            cfg,
            &rope,
            &run.blocks[depth - 1],
            dh,
            &mut grads.blocks[depth - 1],
        );
    }

    let demb = grads.token_embedding.data_mut();
    for (t, row) in tokens.iter().zip(dh.chunks_exact(d)) {
        let dst = &mut demb[*t as usize * d..(*t as usize + 1) * d];
        add_assign(dst, row);
    }
}
