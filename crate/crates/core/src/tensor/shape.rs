use super::{Backward, Graph, Tensor, Var};
use crate::error::{shape_err, Result};

struct Reshape;
impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor {
            shape: inputs[0].shape().to_vec(),
            data: grad.data().to_vec(),
        })]
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = data[r * cols + c];
                }
            }
        }
    }
    out
}

struct Transpose {
    rows: usize,
    cols: usize,
}
impl Backward for Transpose {
    fn name(&self) -> &'static str {
        "transpose2d"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor {
            shape: vec![self.rows, self.cols],
            data: transpose(grad.data(), self.cols, self.rows),
        })]
    }
}

/// `[N, h·d]` ↔ `[h, N, d]`.
fn split_heads(data: &[f64], n: usize, h: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        for head in 0..h {
            out[(head * n + i) * d..][..d].copy_from_slice(&data[i * h * d + head * d..][..d]);
        }
    }
    out
}

fn merge_heads(data: &[f64], n: usize, h: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        for head in 0..h {
            out[i * h * d + head * d..][..d].copy_from_slice(&data[(head * n + i) * d..][..d]);
        }
    }
    out
}

struct SplitHeads {
    n: usize,
    h: usize,
    d: usize,
}
impl Backward for SplitHeads {
    fn name(&self) -> &'static str {
        "split_heads"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor {
            shape: vec![self.n, self.h * self.d],
            data: merge_heads(grad.data(), self.n, self.h, self.d),
        })]
    }
}

struct MergeHeads {
    n: usize,
    h: usize,
    d: usize,
}
impl Backward for MergeHeads {
    fn name(&self) -> &'static str {
        "merge_heads"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor {
            shape: vec![self.h, self.n, self.d],
            data: split_heads(grad.data(), self.n, self.h, self.d),
        })]
    }
}

struct Concat0 {
    split: usize,
}
impl Backward for Concat0 {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = grad.data().split_at(self.split);
        vec![
            Some(Tensor {
                shape: inputs[0].shape().to_vec(),
                data: a.to_vec(),
            }),
            Some(Tensor {
                shape: inputs[1].shape().to_vec(),
                data: b.to_vec(),
            }),
        ]
    }
}

struct Crop3d {
    out: [usize; 3],
}
impl Backward for Crop3d {
    fn name(&self) -> &'static str {
        "crop3d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let [c, d, h, w] = x.dims4("crop3d").expect("validated in forward");
        let [od, oh, ow] = self.out;
        let mut gx = Tensor::zeros(x.shape());
        for ch in 0..c {
            for a in 0..od {
                for b in 0..oh {
                    let src = ((ch * od + a) * oh + b) * ow;
                    let dst = ((ch * d + a) * h + b) * w;
                    gx.data[dst..dst + ow].copy_from_slice(&grad.data()[src..src + ow]);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct Embedding {
    ids: Vec<usize>,
}
impl Backward for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let table = inputs[0];
        let e = table.shape()[1];
        let mut gt = Tensor::zeros(table.shape());
        for (row, &id) in grad.data().chunks(e).zip(&self.ids) {
            for (d, g) in gt.data[id * e..(id + 1) * e].iter_mut().zip(row) {
                *d += g;
            }
        }
        vec![Some(gt)]
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, &[x], Reshape))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let [rows, cols] = self.shape(x)[..] else {
            shape_err!("transpose2d: expected rank 2, got {:?}", self.shape(x));
        };
        let data = transpose(self.value(x).data(), rows, cols);
        let y = Tensor {
            shape: vec![cols, rows],
            data,
        };
        Ok(self.push(y, &[x], Transpose { rows, cols }))
    }

    /// `[C, D, H, W]` → `[D·H·W, C]` (one row per voxel).
    pub fn voxels_to_rows(&mut self, x: Var) -> Result<Var> {
        let [c, d, h, w] = self.value(x).dims4("voxels_to_rows")?;
        let flat = self.reshape(x, &[c, d * h * w])?;
        self.transpose2d(flat)
    }

    /// `[D·H·W, C]` → `[C, D, H, W]`.
    pub fn rows_to_voxels(&mut self, x: Var, dims: [usize; 3]) -> Result<Var> {
        let t = self.transpose2d(x)?;
        let c = self.shape(t)[0];
        self.reshape(t, &[c, dims[0], dims[1], dims[2]])
    }

    /// `[N, h·d]` → `[h, N, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let [n, width] = self.shape(x)[..] else {
            shape_err!("split_heads: expected rank 2, got {:?}", self.shape(x));
        };
        if heads == 0 || width % heads != 0 {
            shape_err!("split_heads: width {width} not divisible by {heads} heads");
        }
        let d = width / heads;
        let data = split_heads(self.value(x).data(), n, heads, d);
        let y = Tensor {
            shape: vec![heads, n, d],
            data,
        };
        Ok(self.push(y, &[x], SplitHeads { n, h: heads, d }))
    }

    /// `[h, N, d]` → `[N, h·d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let [h, n, d] = self.shape(x)[..] else {
            shape_err!("merge_heads: expected rank 3, got {:?}", self.shape(x));
        };
        let data = merge_heads(self.value(x).data(), n, h, d);
        let y = Tensor {
            shape: vec![n, h * d],
            data,
        };
        Ok(self.push(y, &[x], MergeHeads { n, h, d }))
    }

    /// Concatenation along axis 0; `a` comes first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            shape_err!("concat_channels: trailing axes differ {sa:?} vs {sb:?}");
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let split = self.value(a).numel();
        Ok(self.push(Tensor { shape, data }, &[a, b], Concat0 { split }))
    }

    /// Keeps the leading `out` voxels of each spatial axis.
    pub fn crop3d(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        let [c, d, h, w] = self.value(x).dims4("crop3d")?;
        if out[0] > d || out[1] > h || out[2] > w || out.contains(&0) {
            shape_err!("crop3d: {out:?} does not fit inside {:?}", [d, h, w]);
        }
        if out == [d, h, w] {
            return Ok(x);
        }
        let [od, oh, ow] = out;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(c * od * oh * ow);
        for ch in 0..c {
            for a in 0..od {
                for b in 0..oh {
                    let src = ((ch * d + a) * h + b) * w;
                    data.extend_from_slice(&xv[src..src + ow]);
                }
            }
        }
        let y = Tensor {
            shape: vec![c, od, oh, ow],
            data,
        };
        Ok(self.push(y, &[x], Crop3d { out }))
    }

    /// Row lookup `table[ids[i]]` producing `[len(ids), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [rows, e] = self.shape(table)[..] else {
            shape_err!("embedding table: expected [R, E], got {:?}", self.shape(table));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            shape_err!("embedding: id {bad} outside table of {rows} rows");
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        let y = Tensor {
            shape: vec![ids.len(), e],
            data,
        };
        Ok(self.push(y, &[table], Embedding { ids: ids.to_vec() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new([4, 6], data.clone()).unwrap());
        let s = g.split_heads(x, 3).unwrap();
        assert_eq!(g.shape(s), &[3, 4, 2]);
        // head 1, row 2 = columns 2..4 of row 2
        assert_eq!(&g.value(s).data()[(4 + 2) * 2..][..2], &[14.0, 15.0]);
        let m = g.merge_heads(s).unwrap();
        assert_eq!(g.value(m).data(), &data[..]);
    }

    #[test]
    fn voxel_rows_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new([3, 2, 2, 2], data).unwrap());
        let r = g.voxels_to_rows(x).unwrap();
        assert_eq!(g.shape(r), &[8, 3]);
        assert_eq!(&g.value(r).data()[..3], &[0.0, 8.0, 16.0]);
        let back = g.rows_to_voxels(r, [2, 2, 2]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn embedding_counts_rows() {
        let mut g = Graph::new();
        let table = g.param(Tensor::zeros(&[3, 2]));
        let e = g.embedding(table, &[0, 2, 2, 1, 2]).unwrap();
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 1.0, 1.0, 3.0, 3.0]);
        assert!(g.embedding(table, &[3]).is_err());
    }
}
