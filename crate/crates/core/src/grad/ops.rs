use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::scalar::Real;

use super::tensor::Tensor;

/// Flat gather pattern: `None` reads as zero. Shared via `Rc` so cached
/// index patterns (im2col, transposes) are not re-cloned per call.
pub type GatherIndices = Rc<Vec<Option<usize>>>;
/// Mean-pool groups: each output element averages the listed flat inputs.
pub type PoolGroups = Rc<Vec<Vec<usize>>>;

fn mismatch(op: &'static str, lhs: Vec<usize>, rhs: Vec<usize>) -> CoreError {
    CoreError::ShapeMismatch { op, lhs, rhs }
}

/// C[n x m] += or = A[n x k] * B[k x m], ikj order.
fn matmul_nn<T: Real>(a: &[T], n: usize, k: usize, b: &[T], m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

/// C[n x k] = A[n x m] * B^T where B is [k x m].
fn matmul_nt<T: Real>(a: &[T], n: usize, m: usize, b: &[T], k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C[k x m] = A^T * B where A is [n x k], B is [n x m].
fn matmul_tn<T: Real>(a: &[T], n: usize, k: usize, b: &[T], m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for j in 0..k {
            let av = a[i * k + j];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[j * m..(j + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

impl<T: Real> Tensor<T> {
    fn same_shape_op(
        &self,
        other: &Tensor<T>,
        op: &'static str,
    ) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
        let (s1, s2) = (self.shape(), other.shape());
        if s1 != s2 {
            return Err(mismatch(op, s1, s2));
        }
        Ok((s1, self.data_vec(), other.data_vec()))
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, a, b) = self.same_shape_op(other, "add")?;
        let data = a.iter().zip(&b).map(|(x, y)| *x + *y).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op_output(shape, data, &[self, other], move |dz| {
            pa.accumulate_grad(dz);
            pb.accumulate_grad(dz);
        }))
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, a, b) = self.same_shape_op(other, "sub")?;
        let data = a.iter().zip(&b).map(|(x, y)| *x - *y).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op_output(shape, data, &[self, other], move |dz| {
            pa.accumulate_grad(dz);
            let neg: Vec<T> = dz.iter().map(|g| -*g).collect();
            pb.accumulate_grad(&neg);
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, a, b) = self.same_shape_op(other, "mul")?;
        let data = a.iter().zip(&b).map(|(x, y)| *x * *y).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op_output(shape, data, &[self, other], move |dz| {
            if pa.requires_grad() {
                let bd = pb.data_vec();
                let da: Vec<T> = dz.iter().zip(&bd).map(|(g, v)| *g * *v).collect();
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let ad = pa.data_vec();
                let db: Vec<T> = dz.iter().zip(&ad).map(|(g, v)| *g * *v).collect();
                pb.accumulate_grad(&db);
            }
        }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data_vec().iter().map(|x| *x * c).collect();
        let pa = self.clone();
        Tensor::op_output(self.shape(), data, &[self], move |dz| {
            let da: Vec<T> = dz.iter().map(|g| *g * c).collect();
            pa.accumulate_grad(&da);
        })
    }

    /// Broadcast-add a `[d]` bias to every row of an `[n, d]` matrix.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        let bshape = bias.shape();
        if shape.len() != 2 || bshape.len() != 1 || bshape[0] != shape[1] {
            return Err(mismatch("add_row", shape, bshape));
        }
        let (n, d) = (shape[0], shape[1]);
        let a = self.data_vec();
        let b = bias.data_vec();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(a[i * d + j] + b[j]);
            }
        }
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::op_output(shape, data, &[self, bias], move |dz| {
            pa.accumulate_grad(dz);
            if pb.requires_grad() {
                let mut db = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += dz[i * d + j];
                    }
                }
                pb.accumulate_grad(&db);
            }
        }))
    }

    /// Matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (s1, s2) = (self.shape(), other.shape());
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[0] {
            return Err(mismatch("matmul", s1, s2));
        }
        let (n, k, m) = (s1[0], s1[1], s2[1]);
        let data = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            matmul_nn(&a.data, n, k, &b.data, m)
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op_output(
            vec![n, m],
            data,
            &[self, other],
            move |dz| {
                if pa.requires_grad() {
                    let da = {
                        let b = pb.inner.borrow();
                        matmul_nt(dz, n, m, &b.data, k)
                    };
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let db = {
                        let a = pa.inner.borrow();
                        matmul_tn(&a.data, n, k, dz, m)
                    };
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", s, vec![]));
        }
        let (n, m) = (s[0], s[1]);
        let a = self.data_vec();
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = a[i * m + j];
            }
        }
        let pa = self.clone();
        Ok(Tensor::op_output(vec![m, n], data, &[self], move |dz| {
            let mut da = vec![T::zero(); n * m];
            for j in 0..m {
                for i in 0..n {
                    da[i * m + j] = dz[j * n + i];
                }
            }
            pa.accumulate_grad(&da);
        }))
    }

    /// Rectified linear unit.
    pub fn relu(&self) -> Tensor<T> {
        let a = self.data_vec();
        let data: Vec<T> = a.iter().map(|x| x.max(T::zero())).collect();
        let pa = self.clone();
        Tensor::op_output(self.shape(), data, &[self], move |dz| {
            let an = pa.inner.borrow();
            let da: Vec<T> = dz
                .iter()
                .zip(&an.data)
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect();
            drop(an);
            pa.accumulate_grad(&da);
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data_vec().iter().copied().sum();
        let numel = self.numel();
        let shape = self.shape();
        let pa = self.clone();
        Tensor::op_output(vec![1], vec![total], &[self], move |dz| {
            let _ = &shape;
            pa.accumulate_grad(&vec![dz[0]; numel]);
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<T> {
        let numel = self.numel();
        let inv = T::one() / T::from_usize(numel.max(1)).unwrap();
        let total: T = self.data_vec().iter().copied().sum();
        let pa = self.clone();
        Tensor::op_output(vec![1], vec![total * inv], &[self], move |dz| {
            pa.accumulate_grad(&vec![dz[0] * inv; numel]);
        })
    }

    /// Concatenate same-rank tensors along `axis`.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat", "no operands"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(CoreError::invalid(
                "concat",
                format!("axis {} out of range for rank {}", axis, first.len()),
            ));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() {
                return Err(mismatch("concat", first, s));
            }
            for (d, (a, b)) in first.iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(mismatch("concat", first.clone(), s.clone()));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let s = p.shape();
                let block = s[axis] * inner;
                let pd = p.inner.borrow();
                data.extend_from_slice(&pd.data[o * block..(o + 1) * block]);
            }
        }

        let owned: Vec<Tensor<T>> = parts.to_vec();
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::op_output(out_shape, data, &refs, move |dz| {
            let mut offsets = vec![0usize; owned.len()];
            let mut grads: Vec<Vec<T>> = axis_sizes
                .iter()
                .map(|a| vec![T::zero(); outer * a * inner])
                .collect();
            let row = axis_total * inner;
            for o in 0..outer {
                let mut cursor = o * row;
                for (pi, a) in axis_sizes.iter().enumerate() {
                    let block = a * inner;
                    grads[pi][offsets[pi]..offsets[pi] + block]
                        .copy_from_slice(&dz[cursor..cursor + block]);
                    offsets[pi] += block;
                    cursor += block;
                }
            }
            for (p, g) in owned.iter().zip(&grads) {
                p.accumulate_grad(g);
            }
        }))
    }

    /// Normalize along the last axis to unit L2 norm. Exact-zero rows stay
    /// zero and receive zero gradient.
    pub fn l2_normalize(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| CoreError::invalid("l2_normalize", "rank-0 tensor"))?;
        let rows = self.numel() / d;
        let a = self.data_vec();
        let mut data = vec![T::zero(); a.len()];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &a[r * d..(r + 1) * d];
            let norm = row.iter().map(|x| *x * *x).sum::<T>().sqrt();
            norms[r] = norm;
            if norm > T::zero() {
                for j in 0..d {
                    data[r * d + j] = row[j] / norm;
                }
            }
        }
        let y = data.clone();
        let pa = self.clone();
        Ok(Tensor::op_output(shape, data, &[self], move |dz| {
            let mut da = vec![T::zero(); y.len()];
            for r in 0..rows {
                let norm = norms[r];
                if norm == T::zero() {
                    continue;
                }
                let yr = &y[r * d..(r + 1) * d];
                let gz = &dz[r * d..(r + 1) * d];
                let dot: T = yr.iter().zip(gz).map(|(u, g)| *u * *g).sum();
                for j in 0..d {
                    da[r * d + j] = (gz[j] - yr[j] * dot) / norm;
                }
            }
            pa.accumulate_grad(&da);
        }))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| CoreError::invalid("log_softmax", "rank-0 tensor"))?;
        if d == 0 {
            return Err(CoreError::invalid("log_softmax", "empty last axis"));
        }
        let rows = self.numel() / d;
        let a = self.data_vec();
        let mut data = vec![T::zero(); a.len()];
        for r in 0..rows {
            let row = &a[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|x| (*x - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..d {
                data[r * d + j] = row[j] - lse;
            }
        }
        let y = data.clone();
        let pa = self.clone();
        Ok(Tensor::op_output(shape, data, &[self], move |dz| {
            let mut da = vec![T::zero(); y.len()];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gz = &dz[r * d..(r + 1) * d];
                let gsum: T = gz.iter().copied().sum();
                for j in 0..d {
                    da[r * d + j] = gz[j] - yr[j].exp() * gsum;
                }
            }
            pa.accumulate_grad(&da);
        }))
    }

    /// Elementwise smooth-L1 deviation from a constant target.
    pub fn smooth_l1(&self, target: &[T], beta: T) -> Result<Tensor<T>> {
        if target.len() != self.numel() {
            return Err(mismatch("smooth_l1", self.shape(), vec![target.len()]));
        }
        if beta <= T::zero() {
            return Err(CoreError::invalid("smooth_l1", "beta must be positive"));
        }
        let half = crate::scalar::real::<T>(0.5);
        let a = self.data_vec();
        let mut data = Vec::with_capacity(a.len());
        let mut gfac = Vec::with_capacity(a.len());
        for (x, t) in a.iter().zip(target) {
            let d = *x - *t;
            if d.abs() < beta {
                data.push(half * d * d / beta);
                gfac.push(d / beta);
            } else {
                data.push(d.abs() - half * beta);
                gfac.push(d.signum());
            }
        }
        let pa = self.clone();
        Ok(Tensor::op_output(self.shape(), data, &[self], move |dz| {
            let da: Vec<T> = dz.iter().zip(&gfac).map(|(g, f)| *g * *f).collect();
            pa.accumulate_grad(&da);
        }))
    }

    /// Elementwise binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(mismatch(
                "bce_with_logits",
                self.shape(),
                vec![targets.len()],
            ));
        }
        let a = self.data_vec();
        let mut data = Vec::with_capacity(a.len());
        let mut gfac = Vec::with_capacity(a.len());
        for (x, t) in a.iter().zip(targets) {
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            let loss = x.max(T::zero()) - *x * *t + (T::one() + (-x.abs()).exp()).ln();
            data.push(loss);
            let sig = if *x >= T::zero() {
                T::one() / (T::one() + (-*x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            };
            gfac.push(sig - *t);
        }
        let pa = self.clone();
        Ok(Tensor::op_output(self.shape(), data, &[self], move |dz| {
            let da: Vec<T> = dz.iter().zip(&gfac).map(|(g, f)| *g * *f).collect();
            pa.accumulate_grad(&da);
        }))
    }

    /// Mean negative log-likelihood of `labels` under `[n, c]` row
    /// log-probabilities.
    pub fn cross_entropy_from_logp(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(mismatch("cross_entropy_from_logp", shape, vec![]));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(mismatch(
                "cross_entropy_from_logp",
                shape,
                vec![labels.len()],
            ));
        }
        if n == 0 {
            return Err(CoreError::invalid("cross_entropy_from_logp", "empty batch"));
        }
        for (i, l) in labels.iter().enumerate() {
            if *l >= c {
                return Err(CoreError::invalid(
                    "cross_entropy_from_logp",
                    format!("label {} out of range {} at row {}", l, c, i),
                ));
            }
        }
        let a = self.data_vec();
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut total = T::zero();
        for (i, l) in labels.iter().enumerate() {
            total -= a[i * c + l];
        }
        let owned_labels = labels.to_vec();
        let pa = self.clone();
        Ok(Tensor::op_output(
            vec![1],
            vec![total * inv],
            &[self],
            move |dz| {
                let mut da = vec![T::zero(); n * c];
                for (i, l) in owned_labels.iter().enumerate() {
                    da[i * c + l] = -dz[0] * inv;
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// Cosine-similarity matrix between the rows of `self` `[n, d]` and
    /// `other` `[m, d]`: rows are unit-normalized first.
    pub fn cosine_sim(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (s1, s2) = (self.shape(), other.shape());
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[1] {
            return Err(mismatch("cosine_sim", s1, s2));
        }
        let na = self.l2_normalize()?;
        let nb = other.l2_normalize()?;
        na.matmul(&nb.transpose()?)
    }

    /// Gather flattened elements into a new shape; `None` reads zero.
    pub fn gather(&self, indices: &GatherIndices, out_shape: &[usize]) -> Result<Tensor<T>> {
        let out_numel: usize = out_shape.iter().product();
        if out_numel != indices.len() {
            return Err(CoreError::invalid(
                "gather",
                format!(
                    "out shape {:?} wants {} indices, got {}",
                    out_shape,
                    out_numel,
                    indices.len()
                ),
            ));
        }
        let numel = self.numel();
        let a = self.inner.borrow();
        let mut data = Vec::with_capacity(indices.len());
        for idx in indices.iter() {
            match idx {
                Some(j) => {
                    if *j >= numel {
                        return Err(CoreError::invalid(
                            "gather",
                            format!("index {} out of bounds for {} elements", j, numel),
                        ));
                    }
                    data.push(a.data[*j]);
                }
                None => data.push(T::zero()),
            }
        }
        drop(a);
        let pa = self.clone();
        let idx = Rc::clone(indices);
        Ok(Tensor::op_output(
            out_shape.to_vec(),
            data,
            &[self],
            move |dz| {
                let mut da = vec![T::zero(); numel];
                for (g, slot) in dz.iter().zip(idx.iter()) {
                    if let Some(j) = slot {
                        da[*j] += *g;
                    }
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// Mean-pool groups of flattened elements into a new shape.
    pub fn pool_mean(&self, groups: &PoolGroups, out_shape: &[usize]) -> Result<Tensor<T>> {
        let out_numel: usize = out_shape.iter().product();
        if out_numel != groups.len() {
            return Err(CoreError::invalid(
                "pool_mean",
                format!(
                    "out shape {:?} wants {} groups, got {}",
                    out_shape,
                    out_numel,
                    groups.len()
                ),
            ));
        }
        let numel = self.numel();
        let a = self.inner.borrow();
        let mut data = Vec::with_capacity(groups.len());
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(CoreError::invalid(
                    "pool_mean",
                    format!("group {} is empty", gi),
                ));
            }
            let mut acc = T::zero();
            for j in group {
                if *j >= numel {
                    return Err(CoreError::invalid(
                        "pool_mean",
                        format!("index {} out of bounds for {} elements", j, numel),
                    ));
                }
                acc += a.data[*j];
            }
            data.push(acc / T::from_usize(group.len()).unwrap());
        }
        drop(a);
        let pa = self.clone();
        let gr = Rc::clone(groups);
        Ok(Tensor::op_output(
            out_shape.to_vec(),
            data,
            &[self],
            move |dz| {
                let mut da = vec![T::zero(); numel];
                for (g, group) in dz.iter().zip(gr.iter()) {
                    let share = *g / T::from_usize(group.len()).unwrap();
                    for j in group {
                        da[*j] += share;
                    }
                }
                pa.accumulate_grad(&da);
            },
        ))
    }

    /// View the same elements under a new shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(mismatch("reshape", self.shape(), new_shape.to_vec()));
        }
        let pa = self.clone();
        Ok(Tensor::op_output(
            new_shape.to_vec(),
            self.data_vec(),
            &[self],
            move |dz| {
                pa.accumulate_grad(dz);
            },
        ))
    }
}
