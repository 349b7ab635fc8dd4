use std::sync::Arc;

use super::rulebook::Rulebook;
use crate::autodiff::{matmul, matmul_at, matmul_bt, CustomOp, DenseArray, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

/// Gather, multiply per kernel offset, scatter-add. Inputs are the features
/// `[n_in, c_in]`, the weight `[K, c_in, c_out]` and an optional bias
/// `[c_out]`. Accumulation runs offset by offset in rulebook order.
#[derive(Debug)]
pub struct SparseConvOp {
    pub rulebook: Arc<Rulebook>,
}

impl SparseConvOp {
    fn check(&self, inputs: &[&DenseArray]) -> Result<(usize, usize)> {
        let rb = &self.rulebook;
        let (x, w) = (inputs[0], inputs[1]);
        if x.rank() != 2 || x.rows() != rb.n_in {
            return Err(Error::shape("sparse_conv input", format!("[{}, c_in]", rb.n_in), format!("{:?}", x.dims())));
        }
        let c_in = x.last_dim();
        if w.rank() != 3 || w.dims()[0] != rb.volume() || w.dims()[1] != c_in {
            return Err(Error::shape(
                "sparse_conv weight",
                format!("[{}, {c_in}, c_out]", rb.volume()),
                format!("{:?}", w.dims()),
            ));
        }
        let c_out = w.dims()[2];
        if let Some(b) = inputs.get(2) {
            if b.dims() != [c_out] {
                return Err(Error::shape("sparse_conv bias", format!("[{c_out}]"), format!("{:?}", b.dims())));
            }
        }
        Ok((c_in, c_out))
    }
}

fn gather(src: &[f64], width: usize, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

impl CustomOp for SparseConvOp {
    fn name(&self) -> &'static str {
        "sparse_conv"
    }

    fn forward(&self, inputs: &[&DenseArray]) -> Result<DenseArray> {
        let (c_in, c_out) = self.check(inputs)?;
        let rb = &self.rulebook;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let mut out = vec![0.0; rb.n_out * c_out];
        if let Some(b) = inputs.get(2) {
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(b.data());
            }
        }
        for (k, pairs) in rb.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let g = gather(x, c_in, pairs.iter().map(|p| p.0 as usize));
            let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
            let prod = matmul(&g, wk, pairs.len(), c_in, c_out);
            for (j, p) in pairs.iter().enumerate() {
                let o = p.1 as usize;
                out[o * c_out..(o + 1) * c_out]
                    .iter_mut()
                    .zip(&prod[j * c_out..(j + 1) * c_out])
                    .for_each(|(a, b)| *a += b);
            }
        }
        DenseArray::new(vec![rb.n_out, c_out], out)
    }

    fn backward(&self, inputs: &[&DenseArray], _output: &DenseArray, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let rb = &self.rulebook;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let c_in = inputs[0].last_dim();
        let c_out = inputs[1].dims()[2];
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for (k, pairs) in rb.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let go = gather(grad_out, c_out, pairs.iter().map(|p| p.1 as usize));
            let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
            if let Some(dx) = dx.as_mut() {
                let gi = matmul_bt(&go, wk, pairs.len(), c_out, c_in);
                for (j, p) in pairs.iter().enumerate() {
                    let i = p.0 as usize;
                    dx[i * c_in..(i + 1) * c_in]
                        .iter_mut()
                        .zip(&gi[j * c_in..(j + 1) * c_in])
                        .for_each(|(a, b)| *a += b);
                }
            }
            if let Some(dw) = dw.as_mut() {
                let xi = gather(x, c_in, pairs.iter().map(|p| p.0 as usize));
                let gk = matmul_at(&xi, &go, pairs.len(), c_in, c_out);
                dw[k * c_in * c_out..(k + 1) * c_in * c_out]
                    .iter_mut()
                    .zip(&gk)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() > 2 {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; c_out];
                for row in grad_out.chunks(c_out) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            }));
        }
        out
    }
}

/// Sparse convolution with parameters `{prefix}.w` `[K, c_in, c_out]` and
/// `{prefix}.b` `[c_out]`.
pub fn sparse_conv(g: &mut Graph, store: &ParamStore, x: NodeId, rulebook: Arc<Rulebook>, prefix: &str) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.custom(Arc::new(SparseConvOp { rulebook }), &[x, w, b])
}
