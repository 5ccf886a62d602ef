//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Tape`] records every operation as it executes. Nodes are appended in
//! execution order, so walking the node list backwards is a reverse
//! topological traversal. Gradients accumulate additively into shared inputs.
//! The tape is rebuilt each optimizer step.

use crate::error::{Error, Result};
use crate::tensor::{axpy_add, matmul_kernel, transpose_kernel, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, pad: (usize, usize) },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    UpsampleNearest { input: Var, fh: usize, fw: usize },
    Pad2d { input: Var },
    Crop2d { input: Var },
    Relu { input: Var },
    Mul { a: Var, b: Var },
    /// out[i][j] = a[i][j] * v[j], v broadcast over the batch axis.
    MulColBroadcast { a: Var, v: Var },
    /// out[i][j] = a[i][j] + v[j] (bias over a batch of row vectors).
    AddColBroadcast { a: Var, v: Var },
    ConcatChannels { a: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, softmax: Vec<T> },
    Sum { input: Var },
    Reshape { input: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a leaf whose gradient is never tracked (stop-gradient input).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if untracked or unreached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward output");
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- forward

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.value(a).dims2()?;
        let (k2, c) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), r, k, c);
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Matmul { a, b }))
    }

    /// Cross-correlation with zero padding, stride 1.
    /// input [C_in x H x W], kernel [C_out x C_in x kh x kw], optional bias [C_out].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, pad: (usize, usize)) -> Result<Var> {
        let (ci, h, w) = self.value(input).dims3()?;
        let (co, ci2, kh, kw) = self.value(kernel).dims4()?;
        let (ph, pw) = pad;
        if ci != ci2 {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {:?} vs kernel {:?}",
                self.value(input).shape(),
                self.value(kernel).shape()
            )));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return Err(Error::Dimension(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.value(b).shape(),
                    co
                )));
            }
        }
        let padded = pad_image(self.value(input).data(), ci, h, w, ph, pw);
        let ho = h + 2 * ph - kh + 1;
        let wo = w + 2 * pw - kw + 1;
        let mut out = conv2d_valid(
            &padded,
            self.value(kernel).data(),
            ci,
            h + 2 * ph,
            w + 2 * pw,
            co,
            kh,
            kw,
        );
        if let Some(b) = bias {
            let bdata = self.value(b).data().to_vec();
            for (ch, &bv) in bdata.iter().enumerate() {
                for o in &mut out[ch * ho * wo..(ch + 1) * ho * wo] {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.map_or(false, |b| self.rg(b));
        let out = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push(out, rg, Op::Conv2d { input, kernel, bias, pad }))
    }

    /// Non-overlapping max pooling with floor semantics; remainder rows and
    /// columns are dropped. Ties go to the first element in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || wh > h || ww > w {
            return Err(Error::Dimension(format!(
                "maxpool window {}x{} invalid for input {}x{}",
                wh, ww, h, w
            )));
        }
        let ho = h / wh;
        let wo = w / ww;
        let data = self.value(input).data();
        let mut out = vec![T::zero(); c * ho * wo];
        let mut argmax = vec![0u32; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..wh {
                        let y = oy * wh + dy;
                        for dx in 0..ww {
                            let x = ox * ww + dx;
                            let idx = (ch * h + y) * w + x;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = (ch * ho + oy) * wo + ox;
                    out[oidx] = best;
                    argmax[oidx] = best_idx as u32;
                }
            }
        }
        let rg = self.rg(input);
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, rg, Op::MaxPool2d { input, argmax }))
    }

    /// Nearest-neighbor upsampling: each element replicated into an fh x fw block.
    pub fn upsample_nearest(&mut self, input: Var, fh: usize, fw: usize) -> Result<Var> {
        if fh == 0 || fw == 0 {
            return Err(Error::Usage("upsample factors must be >= 1".into()));
        }
        let (c, h, w) = self.value(input).dims3()?;
        let data = self.value(input).data();
        let (ho, wo) = (h * fh, w * fw);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let iy = y / fh;
                let irow = &data[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                let orow = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o = irow[x / fw];
                }
            }
        }
        let rg = self.rg(input);
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, rg, Op::UpsampleNearest { input, fh, fw }))
    }

    /// Zero-pad at bottom/right to the target height and width.
    pub fn pad2d(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let (ht, wt) = target;
        if ht < h || wt < w {
            return Err(Error::Dimension(format!(
                "pad2d target {}x{} smaller than input {}x{}",
                ht, wt, h, w
            )));
        }
        let data = self.value(input).data();
        let mut out = vec![T::zero(); c * ht * wt];
        for ch in 0..c {
            for y in 0..h {
                let src = &data[(ch * h + y) * w..(ch * h + y + 1) * w];
                out[(ch * ht + y) * wt..(ch * ht + y) * wt + w].copy_from_slice(src);
            }
        }
        let rg = self.rg(input);
        let out = Tensor::new(vec![c, ht, wt], out)?;
        Ok(self.push(out, rg, Op::Pad2d { input }))
    }

    /// Remove bottom/right padding, keeping the top-left `original` region.
    pub fn crop2d(&mut self, input: Var, original: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let (ho, wo) = original;
        if ho > h || wo > w {
            return Err(Error::Dimension(format!(
                "crop2d target {}x{} larger than input {}x{}",
                ho, wo, h, w
            )));
        }
        let data = self.value(input).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let src = &data[(ch * h + y) * w..(ch * h + y) * w + wo];
                out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo].copy_from_slice(src);
            }
        }
        let rg = self.rg(input);
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, rg, Op::Crop2d { input }))
    }

    /// max(x, 0); subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let data: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let rg = self.rg(input);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, rg, Op::Relu { input }))
    }

    /// Elementwise product. Accepts identical shapes, or a 2-D `a` with a 1-D
    /// `b` of length a.cols broadcast over the batch (row) axis.
    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa == sb {
            let data: Vec<T> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect();
            let rg = self.rg(a) || self.rg(b);
            let out = Tensor::new(sa, data)?;
            return Ok(self.push(out, rg, Op::Mul { a, b }));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (rows, cols) = (sa[0], sa[1]);
            let ad = self.value(a).data();
            let vd = self.value(b).data();
            let mut data = vec![T::zero(); rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    data[i * cols + j] = ad[i * cols + j] * vd[j];
                }
            }
            let rg = self.rg(a) || self.rg(b);
            let out = Tensor::new(sa, data)?;
            return Ok(self.push(out, rg, Op::MulColBroadcast { a, v: b }));
        }
        Err(Error::Dimension(format!(
            "elementwise_mul shapes incompatible: {:?} vs {:?}",
            sa, sb
        )))
    }

    /// Add a length-n vector to every row of a [B x n] matrix.
    pub fn add_col_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.value(v).shape() != [cols] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match row width {}",
                self.value(v).shape(),
                cols
            )));
        }
        let ad = self.value(a).data();
        let vd = self.value(v).data();
        let mut data = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = ad[i * cols + j] + vd[j];
            }
        }
        let rg = self.rg(a) || self.rg(v);
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, rg, Op::AddColBroadcast { a, v }))
    }

    /// Concatenate along the channel axis; heights and widths must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (c1, h1, w1) = self.value(a).dims3()?;
        let (c2, h2, w2) = self.value(b).dims3()?;
        if h1 != h2 || w1 != w2 {
            return Err(Error::Dimension(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = Vec::with_capacity((c1 + c2) * h1 * w1);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        let out = Tensor::new(vec![c1 + c2, h1, w1], data)?;
        Ok(self.push(out, rg, Op::ConcatChannels { a, b }))
    }

    /// Mean over the batch of -log softmax(logits)[label]; max-stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.value(logits).dims2()?;
        if labels.len() != batch {
            return Err(Error::Dimension(format!(
                "{} labels for batch of {}",
                labels.len(),
                batch
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {} out of range [0, {})", bad, classes)));
        }
        let data = self.value(logits).data();
        let mut softmax = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for i in 0..batch {
            let row = &data[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                softmax[i * classes + j] = e;
                sum += e;
            }
            for j in 0..classes {
                softmax[i * classes + j] = softmax[i * classes + j] / sum;
            }
            loss += sum.ln() - (row[labels[i]] - max);
        }
        loss = loss / T::from_usize(batch).unwrap();
        let rg = self.rg(logits);
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), softmax },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        let rg = self.rg(input);
        let out = Tensor::scalar(acc);
        Ok(self.push(out, rg, Op::Sum { input }))
    }

    /// View with a different shape; gradient passes through unchanged.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Reshape { input }))
    }

    // --------------------------------------------------------------- backward

    /// Populate gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward on a tensor with no recorded graph (nothing requires grad)".into(),
            ));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(Error::Usage("backward on a leaf tensor with no recorded graph".into()));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            // Taking the output grad avoids aliasing with parent grads.
            let gout = self.nodes[idx].grad.take().unwrap();
            self.propagate(idx, &gout);
            self.nodes[idx].grad = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let g = self.nodes[v.0].grad.get_or_insert_with(|| vec![T::zero(); numel]);
        axpy_add(g, contrib);
    }

    fn propagate(&mut self, idx: usize, gout: &[T]) {
        // Ops are matched by moving needed metadata out via borrows; values of
        // parents are read through self.value.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (r, k) = self.value(a).dims2().unwrap();
                let (_, c) = self.value(b).dims2().unwrap();
                if self.rg(a) {
                    // grad_a = gout . b^T
                    let bt = transpose_kernel(self.value(b).data(), k, c);
                    let ga = matmul_kernel(gout, &bt, r, c, k);
                    self.add_grad(a, &ga);
                }
                if self.rg(b) {
                    // grad_b = a^T . gout
                    let at = transpose_kernel(self.value(a).data(), r, k);
                    let gb = matmul_kernel(&at, gout, k, r, c);
                    self.add_grad(b, &gb);
                }
            }
            Op::Conv2d { input, kernel, bias, pad } => {
                let (input, kernel, bias, (ph, pw)) = (*input, *kernel, *bias, *pad);
                let (ci, h, w) = self.value(input).dims3().unwrap();
                let (co, _, kh, kw) = self.value(kernel).dims4().unwrap();
                let (hp, wp) = (h + 2 * ph, w + 2 * pw);
                let (ho, wo) = (hp - kh + 1, wp - kw + 1);
                let padded = pad_image(self.value(input).data(), ci, h, w, ph, pw);
                if self.rg(input) {
                    let gin_p = conv2d_backward_input(
                        gout,
                        self.value(kernel).data(),
                        ci,
                        hp,
                        wp,
                        co,
                        kh,
                        kw,
                    );
                    let gin = unpad_image(&gin_p, ci, h, w, ph, pw);
                    self.add_grad(input, &gin);
                }
                if self.rg(kernel) {
                    let gk = conv2d_backward_kernel(gout, &padded, ci, hp, wp, co, kh, kw);
                    self.add_grad(kernel, &gk);
                }
                if let Some(bv) = bias {
                    if self.rg(bv) {
                        let mut gb = vec![T::zero(); co];
                        for ch in 0..co {
                            for &g in &gout[ch * ho * wo..(ch + 1) * ho * wo] {
                                gb[ch] += g;
                            }
                        }
                        self.add_grad(bv, &gb);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                if self.rg(input) {
                    let mut gin = vec![T::zero(); self.value(input).numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gin[src as usize] += gout[o];
                    }
                    self.add_grad(input, &gin);
                }
            }
            Op::UpsampleNearest { input, fh, fw } => {
                let (input, fh, fw) = (*input, *fh, *fw);
                if self.rg(input) {
                    let (c, h, w) = self.value(input).dims3().unwrap();
                    let (ho, wo) = (h * fh, w * fw);
                    let mut gin = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..ho {
                            let iy = y / fh;
                            for x in 0..wo {
                                gin[(ch * h + iy) * w + x / fw] += gout[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                    self.add_grad(input, &gin);
                }
            }
            Op::Pad2d { input } => {
                let input = *input;
                if self.rg(input) {
                    let (c, h, w) = self.value(input).dims3().unwrap();
                    let (_, ht, wt) = self.nodes[idx].value.dims3().unwrap();
                    let mut gin = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                gin[(ch * h + y) * w + x] = gout[(ch * ht + y) * wt + x];
                            }
                        }
                    }
                    self.add_grad(input, &gin);
                }
            }
            Op::Crop2d { input } => {
                let input = *input;
                if self.rg(input) {
                    let (c, h, w) = self.value(input).dims3().unwrap();
                    let (_, ho, wo) = self.nodes[idx].value.dims3().unwrap();
                    let mut gin = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                gin[(ch * h + y) * w + x] = gout[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                    self.add_grad(input, &gin);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.rg(input) {
                    let gin: Vec<T> = self
                        .value(input)
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.add_grad(input, &gin);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let ga: Vec<T> =
                        self.value(b).data().iter().zip(gout).map(|(&y, &g)| y * g).collect();
                    self.add_grad(a, &ga);
                }
                if self.rg(b) {
                    let gb: Vec<T> =
                        self.value(a).data().iter().zip(gout).map(|(&x, &g)| x * g).collect();
                    self.add_grad(b, &gb);
                }
            }
            Op::MulColBroadcast { a, v } => {
                let (a, v) = (*a, *v);
                let (rows, cols) = self.value(a).dims2().unwrap();
                if self.rg(a) {
                    let vd = self.value(v).data();
                    let mut ga = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] = gout[i * cols + j] * vd[j];
                        }
                    }
                    self.add_grad(a, &ga);
                }
                if self.rg(v) {
                    let ad = self.value(a).data();
                    let mut gv = vec![T::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            gv[j] += gout[i * cols + j] * ad[i * cols + j];
                        }
                    }
                    self.add_grad(v, &gv);
                }
            }
            Op::AddColBroadcast { a, v } => {
                let (a, v) = (*a, *v);
                if self.rg(a) {
                    self.add_grad(a, gout);
                }
                if self.rg(v) {
                    let (rows, cols) = self.value(a).dims2().unwrap();
                    let mut gv = vec![T::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            gv[j] += gout[i * cols + j];
                        }
                    }
                    self.add_grad(v, &gv);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let na = self.value(a).numel();
                if self.rg(a) {
                    self.add_grad(a, &gout[..na]);
                }
                if self.rg(b) {
                    self.add_grad(b, &gout[na..]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, softmax } => {
                let logits = *logits;
                if self.rg(logits) {
                    let (batch, classes) = self.value(logits).dims2().unwrap();
                    let scale = gout[0] / T::from_usize(batch).unwrap();
                    let mut g = vec![T::zero(); batch * classes];
                    for i in 0..batch {
                        for j in 0..classes {
                            let one_hot =
                                if labels[i] == j { T::one() } else { T::zero() };
                            g[i * classes + j] = (softmax[i * classes + j] - one_hot) * scale;
                        }
                    }
                    self.add_grad(logits, &g);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.rg(input) {
                    let g = vec![gout[0]; self.value(input).numel()];
                    self.add_grad(input, &g);
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if self.rg(input) {
                    self.add_grad(input, gout);
                }
            }
        }
    }
}

// ------------------------------------------------------------- conv kernels

fn pad_image<T: Scalar>(data: &[T], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    if ph == 0 && pw == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &data[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * hp + y + ph) * wp + pw;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

fn unpad_image<T: Scalar>(data: &[T], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    if ph == 0 && pw == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * hp + y + ph) * wp + pw;
            out[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

/// Valid cross-correlation on an already padded input. Inner loop runs along
/// contiguous rows so it vectorizes.
fn conv2d_valid<T: Scalar>(
    input: &[T],
    kernel: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::zero(); co * ho * wo];
    // Row-major blocking: each output row accumulates in cache while the
    // handful of contributing input rows stay hot.
    for y in 0..ho {
        for oc in 0..co {
            let orow = &mut out[(oc * ho + y) * wo..(oc * ho + y + 1) * wo];
            for ic in 0..ci {
                for ky in 0..kh {
                    let irow = &input[(ic * h + y + ky) * w..(ic * h + y + ky + 1) * w];
                    for kx in 0..kw {
                        let kv = kernel[((oc * ci + ic) * kh + ky) * kw + kx];
                        axpy_scaled(orow, &irow[kx..kx + wo], kv);
                    }
                }
            }
        }
    }
    out
}

/// acc += k * x over equal-length slices; elementwise, so it vectorizes.
#[inline]
fn axpy_scaled<T: Scalar>(acc: &mut [T], x: &[T], k: T) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += k * v;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes without reassociation flags.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for l in lanes {
        s += l;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Gradient of the padded input: scatter gout back through the kernel.
fn conv2d_backward_input<T: Scalar>(
    gout: &[T],
    kernel: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut gin = vec![T::zero(); ci * h * w];
    for y in 0..ho {
        for ic in 0..ci {
            for ky in 0..kh {
                let base = (ic * h + y + ky) * w;
                for oc in 0..co {
                    let grow = &gout[(oc * ho + y) * wo..(oc * ho + y + 1) * wo];
                    for kx in 0..kw {
                        let kv = kernel[((oc * ci + ic) * kh + ky) * kw + kx];
                        axpy_scaled(&mut gin[base + kx..base + kx + wo], grow, kv);
                    }
                }
            }
        }
    }
    gin
}

fn conv2d_backward_kernel<T: Scalar>(
    gout: &[T],
    padded: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    // The kernel gradient is tiny, so it accumulates in cache while each
    // image row is visited once per (oc, ky, kx).
    let mut gk = vec![T::zero(); co * ci * kh * kw];
    for y in 0..ho {
        for oc in 0..co {
            let grow = &gout[(oc * ho + y) * wo..(oc * ho + y + 1) * wo];
            for ic in 0..ci {
                for ky in 0..kh {
                    let base = (ic * h + y + ky) * w;
                    for kx in 0..kw {
                        gk[((oc * ci + ic) * kh + ky) * kw + kx] +=
                            dot(grow, &padded[base + kx..base + kx + wo]);
                    }
                }
            }
        }
    }
    gk
}

// ---------------------------------------------------------------- optimizer

/// Plain SGD with optional momentum: v <- mu*v + g, w <- w - lr*v.
pub struct Sgd<T: Scalar> {
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    /// Momentum buffers, keyed by parameter position (checkpointing).
    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }

    /// Apply one step to `params[i]` using `grads[i]`. Parameter order must be
    /// stable across calls; velocity buffers are keyed by position.
    pub fn step(&mut self, lr: T, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>]) {
        assert_eq!(params.len(), grads.len());
        while self.velocity.len() < params.len() {
            self.velocity.push(Vec::new());
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(grad) = grad else { continue };
            if vel.is_empty() {
                *vel = vec![T::zero(); param.numel()];
            }
            let data = param.data_mut();
            for ((w, &g), v) in data.iter_mut().zip(*grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *w = *w - lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Direct nested-loop convolution (cross-correlation, zero padding),
    /// independent of the im2col-style kernel in the forward pass.
    fn conv_reference(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: Option<&[f64]>,
        pad: (usize, usize),
    ) -> Tensor<f64> {
        let (ci, h, w) = input.dims3().unwrap();
        let (co, cik, kh, kw) = kernel.dims4().unwrap();
        assert_eq!(ci, cik);
        let oh = h + 2 * pad.0 - kh + 1;
        let ow = w + 2 * pad.1 - kw + 1;
        let mut out = Tensor::zeros(vec![co, oh, ow]);
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y + dy) as isize - pad.0 as isize;
                                let ix = (x + dx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()[(c * h + iy as usize) * w + ix as usize]
                                    * kernel.data()[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out.data_mut()[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_nested_loop_reference() {
        let mut rng = seeded_rng(11);
        for case in 0..100 {
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let h = rng.gen_range(1..7);
            let w = rng.gen_range(1..7);
            let kh = rng.gen_range(1..=h.min(3));
            let kw = rng.gen_range(1..=w.min(3));
            let pad = (rng.gen_range(0..2), rng.gen_range(0..2));
            let input = tensor(vec![ci, h, w], rand_vec(&mut rng, ci * h * w));
            let kernel = tensor(vec![co, ci, kh, kw], rand_vec(&mut rng, co * ci * kh * kw));
            let with_bias = case % 2 == 0;
            let bias = with_bias.then(|| tensor(vec![co], rand_vec(&mut rng, co)));

            let mut tape = Tape::new();
            let iv = tape.constant(input.clone());
            let kv = tape.constant(kernel.clone());
            let bv = bias.as_ref().map(|b| tape.constant(b.clone()));
            let out = tape.conv2d(iv, kv, bv, pad).unwrap();
            let want = conv_reference(&input, &kernel, bias.as_ref().map(|b| b.data()), pad);
            assert_eq!(tape.value(out).shape(), want.shape());
            for (g, e) in tape.value(out).data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-10, "case {}: got {} want {}", case, g, e);
            }
        }
    }

    #[test]
    fn maxpool_forward_and_first_occurrence_ties() {
        let mut tape = Tape::new();
        // Window (1,2); second window holds a tie: the earlier element wins.
        let x = tape.leaf(tensor(vec![1, 1, 4], vec![3.0, -1.0, 2.0, 2.0]), true);
        let y = tape.maxpool2d(x, (1, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_floors_a_nondivisible_input() {
        // Floor semantics: a trailing column that does not fill a window is
        // dropped and receives no gradient.
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![1, 1, 5], vec![1.0, 4.0, 2.0, 3.0, 9.0]), true);
        let y = tape.maxpool2d(x, (1, 2)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, 3.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn upsample_nearest_repeats_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(vec![1, 1, 2], vec![4.0, 7.0]));
        let y = tape.upsample_nearest(x, 1, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4]);
        assert_eq!(tape.value(y).data(), &[4.0, 4.0, 7.0, 7.0]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let c = rng.gen_range(1..3);
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let th = h + rng.gen_range(0..4);
            let tw = w + rng.gen_range(0..4);
            let x = tensor(vec![c, h, w], rand_vec(&mut rng, c * h * w));
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let p = tape.pad2d(v, (th, tw)).unwrap();
            assert_eq!(tape.value(p).shape(), &[c, th, tw]);
            let back = tape.crop2d(p, (h, w)).unwrap();
            assert_eq!(tape.value(back).data(), x.data());
        }
    }

    #[test]
    fn pad_fills_bottom_right_with_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(vec![1, 1, 2], vec![5.0, 6.0]));
        let p = tape.pad2d(x, (2, 3)).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![3], vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_of_class_count() {
        for classes in [2usize, 10] {
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::<f64>::zeros(vec![1, classes]));
            let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
            let want = (classes as f64).ln();
            assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let mut tape = Tape::new();
        let logits = tape.leaf(tensor(vec![2, 2], vec![1.0, -1.0, 0.5, 0.5]), true);
        let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let want = [(p0 - 1.0) / 2.0, (1.0 - p0) / 2.0, 0.25, -0.25];
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "got {} want {}", a, b);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(tensor(vec![1, 2], vec![1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).data()[0].is_finite());
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn elementwise_mul_broadcasts_columns() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.constant(tensor(vec![3], vec![10.0, -1.0, 2.0]));
        let y = tape.elementwise_mul(a, v).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, -2.0, 6.0, 40.0, -5.0, 12.0]);
        // A vector matching neither axis is rejected.
        let bad = tape.constant(tensor(vec![2], vec![1.0, 1.0]));
        assert!(tape.elementwise_mul(a, bad).is_err());
    }

    #[test]
    fn concat_channels_stacks_in_order() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor(vec![1, 1, 2], vec![1.0, 2.0]));
        let b = tape.constant(tensor(vec![2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 1, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![2], vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_shared_uses() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![2], vec![3.0, -2.0]), true);
        let y = tape.elementwise_mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn sgd_matches_closed_form_momentum_updates() {
        let mut opt = Sgd::new(0.9f64);
        let mut w = tensor(vec![1], vec![1.0]);
        let g1 = [0.5];
        let g2 = [0.25];
        opt.step(0.1, &mut [&mut w], &[Some(&g1)]);
        // v1 = 0.5, w = 1 - 0.1*0.5
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
        opt.step(0.1, &mut [&mut w], &[Some(&g2)]);
        // v2 = 0.9*0.5 + 0.25 = 0.7, w = 0.95 - 0.07
        assert!((w.data()[0] - 0.88).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_params_without_gradients() {
        let mut opt = Sgd::new(0.0f64);
        let mut w = tensor(vec![1], vec![2.0]);
        opt.step(0.1, &mut [&mut w], &[None]);
        assert_eq!(w.data()[0], 2.0);
    }
}
