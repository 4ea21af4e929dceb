//! Observation network: a small convolutional model mapping one grayscale
//! frame to the dense code matrix `x̂` (`m × r`).
//!
//! Structure: 2-layer conv stem → multi-dilation block (one 3×3 kernel
//! shared by every branch, branches differ only in dilation rate, outputs
//! concatenated) → channel gating (mean-pool, two-layer gate, sigmoid,
//! per-channel rescale) → center pooling (row-max + column-max) with a
//! stride-2 subsample → 3×3 conv head → fully-connected output layer.
//!
//! Forward and backward passes are written out by hand in f64; every block's
//! backward is verified against central finite differences in the tests.
//! Blocks can be disabled individually for ablation runs: gating and center
//! pooling skip cleanly, and disabling the multi-dilation block leaves a
//! single dilation-1 branch so the trunk keeps its depth.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `C × H × W` activation tensor.
pub type FeatureMap = Array3<f64>;

/// Stem hidden width (first conv layer output channels).
pub const STEM_MID: usize = 8;

/// Architecture hyperparameters. `c_b` is the per-branch channel width; the
/// gate reduction `ratio` must divide the concatenated channel count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ObsConfig {
    /// Input frame `(h, w)`.
    pub frame: (usize, usize),
    /// Branch width (stem output channels).
    pub c_b: usize,
    /// Dilation rates, ascending, each ≥ 1.
    pub dilations: Vec<usize>,
    /// Gate bottleneck divisor.
    pub ratio: usize,
    /// Head conv output channels.
    pub head_channels: usize,
    /// Output rows (measurement count `m`, or `n` when regressing sinograms).
    pub out_rows: usize,
    /// Output columns (angle count `r`).
    pub out_cols: usize,
    pub use_mdcb: bool,
    pub use_arfw: bool,
    pub use_center_pool: bool,
}

impl ObsConfig {
    /// Dilation list actually used: `[1]` when the multi-dilation block is
    /// disabled, so the trunk keeps one plain conv branch.
    pub fn effective_dilations(&self) -> Vec<usize> {
        if self.use_mdcb {
            self.dilations.clone()
        } else {
            vec![1]
        }
    }

    /// Channel count entering the gate / pooling stages.
    pub fn trunk_channels(&self) -> usize {
        self.c_b * self.effective_dilations().len()
    }

    /// Spatial dims after the stride-2 subsample.
    pub fn pooled_dims(&self) -> (usize, usize) {
        (self.frame.0.div_ceil(2), self.frame.1.div_ceil(2))
    }

    /// Input width of the fully-connected output layer.
    pub fn flat_len(&self) -> usize {
        let (ph, pw) = self.pooled_dims();
        self.head_channels * ph * pw
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame.0 == 0 || self.frame.1 == 0 {
            return Err(Error::Config(format!("frame {:?} must be positive", self.frame)));
        }
        if self.c_b == 0 || self.head_channels == 0 || self.out_rows == 0 || self.out_cols == 0 {
            return Err(Error::Config("channel/output dims must be positive".into()));
        }
        let dil = self.effective_dilations();
        if dil.is_empty() {
            return Err(Error::Config("dilation set is empty".into()));
        }
        if dil.iter().any(|&d| d < 1) {
            return Err(Error::Config("dilations must be ≥ 1".into()));
        }
        if dil.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("dilations must be strictly ascending".into()));
        }
        if self.use_arfw {
            let c = self.trunk_channels();
            if self.ratio == 0 || c % self.ratio != 0 {
                return Err(Error::Config(format!(
                    "gate ratio {} must divide channel count {c}",
                    self.ratio
                )));
            }
        }
        Ok(())
    }
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig {
            frame: (32, 32),
            c_b: 8,
            dilations: vec![1, 2, 3],
            ratio: 4,
            head_channels: 8,
            out_rows: 39,
            out_cols: 24,
            use_mdcb: true,
            use_arfw: true,
            use_center_pool: true,
        }
    }
}

/// All trainable tensors. The same struct doubles as the gradient container
/// (shapes always match parameter shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct ObsParams {
    /// `STEM_MID × 1 × 3 × 3`
    pub stem1: Array4<f64>,
    /// `c_b × STEM_MID × 3 × 3`
    pub stem2: Array4<f64>,
    /// Shared branch kernel `c_b × c_b × 3 × 3` — one copy for all dilations.
    pub branch: Array4<f64>,
    /// `(C/ratio) × C`; empty when gating is disabled.
    pub w1: Array2<f64>,
    /// `C × (C/ratio)`; empty when gating is disabled.
    pub w2: Array2<f64>,
    /// `head_channels × C × 3 × 3`
    pub head_conv: Array4<f64>,
    /// `(out_rows·out_cols) × flat_len`
    pub fc_w: Array2<f64>,
    /// `out_rows·out_cols` — the only bias in the model.
    pub fc_b: Array1<f64>,
}

/// Gradients for [`ObsParams`], field for field.
pub type ObsGrads = ObsParams;

fn draw(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

impl ObsParams {
    /// Seeded initialization: conv and output kernels `N(0, 2/fan_in)`, gate
    /// matrices `N(0, 1/fan_in)`, bias zero. Draw order is fixed (field
    /// declaration order, row-major within a field).
    pub fn init(cfg: &ObsConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.trunk_channels();
        let gate_mid = if cfg.use_arfw { c / cfg.ratio } else { 0 };
        let flat = cfg.flat_len();
        let out = cfg.out_rows * cfg.out_cols;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        let stem1 = Array4::from_shape_vec(
            (STEM_MID, 1, 3, 3),
            draw(&mut rng, STEM_MID * 9, he(9)),
        )
        .expect("shape");
        let stem2 = Array4::from_shape_vec(
            (cfg.c_b, STEM_MID, 3, 3),
            draw(&mut rng, cfg.c_b * STEM_MID * 9, he(STEM_MID * 9)),
        )
        .expect("shape");
        let branch = Array4::from_shape_vec(
            (cfg.c_b, cfg.c_b, 3, 3),
            draw(&mut rng, cfg.c_b * cfg.c_b * 9, he(cfg.c_b * 9)),
        )
        .expect("shape");
        let w1 = Array2::from_shape_vec(
            (gate_mid, c),
            draw(&mut rng, gate_mid * c, (1.0 / c as f64).sqrt()),
        )
        .expect("shape");
        let w2 = Array2::from_shape_vec(
            (if cfg.use_arfw { c } else { 0 }, gate_mid),
            draw(&mut rng, if cfg.use_arfw { c * gate_mid } else { 0 }, if gate_mid > 0 { (1.0 / gate_mid as f64).sqrt() } else { 0.0 }),
        )
        .expect("shape");
        let head_conv = Array4::from_shape_vec(
            (cfg.head_channels, c, 3, 3),
            draw(&mut rng, cfg.head_channels * c * 9, he(c * 9)),
        )
        .expect("shape");
        let fc_w = Array2::from_shape_vec((out, flat), draw(&mut rng, out * flat, he(flat)))
            .expect("shape");
        let fc_b = Array1::zeros(out);
        Ok(ObsParams { stem1, stem2, branch, w1, w2, head_conv, fc_w, fc_b })
    }

    /// Zero tensors with the same shapes as `like` (gradient accumulator).
    pub fn zeros_like(like: &ObsParams) -> ObsParams {
        ObsParams {
            stem1: Array4::zeros(like.stem1.dim()),
            stem2: Array4::zeros(like.stem2.dim()),
            branch: Array4::zeros(like.branch.dim()),
            w1: Array2::zeros(like.w1.dim()),
            w2: Array2::zeros(like.w2.dim()),
            head_conv: Array4::zeros(like.head_conv.dim()),
            fc_w: Array2::zeros(like.fc_w.dim()),
            fc_b: Array1::zeros(like.fc_b.len()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.stem1.len()
            + self.stem2.len()
            + self.branch.len()
            + self.w1.len()
            + self.w2.len()
            + self.head_conv.len()
            + self.fc_w.len()
            + self.fc_b.len()
    }

    /// `self += f · other`, field for field.
    pub fn add_scaled(&mut self, other: &ObsParams, f: f64) {
        self.stem1.scaled_add(f, &other.stem1);
        self.stem2.scaled_add(f, &other.stem2);
        self.branch.scaled_add(f, &other.branch);
        self.w1.scaled_add(f, &other.w1);
        self.w2.scaled_add(f, &other.w2);
        self.head_conv.scaled_add(f, &other.head_conv);
        self.fc_w.scaled_add(f, &other.fc_w);
        self.fc_b.scaled_add(f, &other.fc_b);
    }

    pub fn scale(&mut self, f: f64) {
        for s in self.flat_mut() {
            for v in s {
                *v *= f;
            }
        }
    }

    /// Mutable flat views over every field, in declaration order. Lets
    /// optimizers treat the whole model as one parameter vector.
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.stem1.as_slice_mut().expect("standard layout"),
            self.stem2.as_slice_mut().expect("standard layout"),
            self.branch.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.head_conv.as_slice_mut().expect("standard layout"),
            self.fc_w.as_slice_mut().expect("standard layout"),
            self.fc_b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Immutable flat views, same order as [`ObsParams::flat_mut`].
    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            self.stem1.as_slice().expect("standard layout"),
            self.stem2.as_slice().expect("standard layout"),
            self.branch.as_slice().expect("standard layout"),
            self.w1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.head_conv.as_slice().expect("standard layout"),
            self.fc_w.as_slice().expect("standard layout"),
            self.fc_b.as_slice().expect("standard layout"),
        ]
    }

    /// Squared L2 norm per field, declaration order (for trainability checks
    /// and logging).
    pub fn group_norms_sq(&self) -> Vec<f64> {
        self.flat()
            .into_iter()
            .map(|s| s.iter().map(|v| v * v).sum())
            .collect()
    }
}

fn relu(fm: &FeatureMap) -> FeatureMap {
    fm.mapv(|v| v.max(0.0))
}

/// Gradient mask of `relu` at `pre`: passes where `pre > 0`.
fn relu_backward(pre: &FeatureMap, dout: &FeatureMap) -> FeatureMap {
    let mut out = dout.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

/// Dilated 3×3 cross-correlation with zero padding equal to the dilation, so
/// spatial dims are preserved. `kernel` is `C_out × C_in × 3 × 3`.
pub fn dilated_conv(fm: &FeatureMap, kernel: &Array4<f64>, dilation: usize) -> Result<FeatureMap> {
    if dilation < 1 {
        return Err(Error::Config(format!("dilation {dilation} must be ≥ 1")));
    }
    let (c_in, h, w) = fm.dim();
    let (c_out, kc_in, kh, kw) = kernel.dim();
    if kc_in != c_in || kh != 3 || kw != 3 {
        return Err(Error::Config(format!(
            "kernel {c_out}×{kc_in}×{kh}×{kw} does not fit input with {c_in} channels"
        )));
    }
    let d = dilation as isize;
    let mut out = Array3::<f64>::zeros((c_out, h, w));
    for o in 0..c_out {
        for c in 0..c_in {
            for ku in 0..3 {
                for kv in 0..3 {
                    let k = kernel[(o, c, ku, kv)];
                    if k == 0.0 {
                        continue;
                    }
                    let du = (ku as isize - 1) * d;
                    let dv = (kv as isize - 1) * d;
                    for i in 0..h {
                        let si = i as isize + du;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dv;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            out[(o, i, j)] += k * fm[(c, si as usize, sj as usize)];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`dilated_conv`] with respect to the kernel and the input.
pub fn dilated_conv_backward(
    fm: &FeatureMap,
    kernel: &Array4<f64>,
    dilation: usize,
    dout: &FeatureMap,
) -> Result<(Array4<f64>, FeatureMap)> {
    let (c_in, h, w) = fm.dim();
    let (c_out, _, _, _) = kernel.dim();
    if dout.dim() != (c_out, h, w) {
        return Err(Error::Config("conv gradient dims do not match output".into()));
    }
    let d = dilation as isize;
    let mut dk = Array4::<f64>::zeros(kernel.dim());
    let mut dfm = Array3::<f64>::zeros(fm.dim());
    for o in 0..c_out {
        for c in 0..c_in {
            for ku in 0..3 {
                for kv in 0..3 {
                    let du = (ku as isize - 1) * d;
                    let dv = (kv as isize - 1) * d;
                    let k = kernel[(o, c, ku, kv)];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i as isize + du;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dv;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let g = dout[(o, i, j)];
                            acc += g * fm[(c, si as usize, sj as usize)];
                            dfm[(c, si as usize, sj as usize)] += g * k;
                        }
                    }
                    dk[(o, c, ku, kv)] += acc;
                }
            }
        }
    }
    Ok((dk, dfm))
}

/// Run the shared kernel at every dilation and concatenate the outputs along
/// the channel axis, branches in ascending dilation order.
pub fn mdcb_forward(
    fm: &FeatureMap,
    branch_kernel: &Array4<f64>,
    dilations: &[usize],
) -> Result<FeatureMap> {
    if dilations.is_empty() {
        return Err(Error::Config("dilation set is empty".into()));
    }
    let (_, h, w) = fm.dim();
    let c_b = branch_kernel.dim().0;
    let mut out = Array3::<f64>::zeros((c_b * dilations.len(), h, w));
    for (b, &dil) in dilations.iter().enumerate() {
        let branch = dilated_conv(fm, branch_kernel, dil)?;
        out.slice_mut(ndarray::s![b * c_b..(b + 1) * c_b, .., ..])
            .assign(&branch);
    }
    Ok(out)
}

/// Backward of [`mdcb_forward`]: the shared kernel accumulates the sum of
/// per-branch kernel gradients; the input gradient sums over branches too.
pub fn mdcb_backward(
    fm: &FeatureMap,
    branch_kernel: &Array4<f64>,
    dilations: &[usize],
    dout: &FeatureMap,
) -> Result<(Array4<f64>, FeatureMap)> {
    if dilations.is_empty() {
        return Err(Error::Config("dilation set is empty".into()));
    }
    let c_b = branch_kernel.dim().0;
    if dout.dim().0 != c_b * dilations.len() {
        return Err(Error::Config("gradient channels do not match branch count".into()));
    }
    let mut dk = Array4::<f64>::zeros(branch_kernel.dim());
    let mut dfm = Array3::<f64>::zeros(fm.dim());
    for (b, &dil) in dilations.iter().enumerate() {
        let slice = dout
            .slice(ndarray::s![b * c_b..(b + 1) * c_b, .., ..])
            .to_owned();
        let (dkb, dfb) = dilated_conv_backward(fm, branch_kernel, dil, &slice)?;
        dk += &dkb;
        dfm += &dfb;
    }
    Ok((dk, dfm))
}

/// Intermediates of the gating block needed by its backward pass.
#[derive(Debug, Clone)]
pub struct ArfwCache {
    /// Per-channel spatial means.
    pub a: Array1<f64>,
    /// Bottleneck pre-activation `W1·a`.
    pub u1: Array1<f64>,
    /// Rectified bottleneck.
    pub h: Array1<f64>,
    /// Gate values, strictly inside `(0, 1)`.
    pub z: Array1<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Channel gating: squeeze each channel to its spatial mean, pass the mean
/// vector through a two-layer gate, and rescale each channel by its gate.
///
/// `a_c = mean(v_c)`; `z = sigmoid(W2·relu(W1·a))`; `out_c = z_c · v_c`.
pub fn arfw_forward(
    fm: &FeatureMap,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
) -> Result<(FeatureMap, ArfwCache)> {
    let (c, h, w) = fm.dim();
    if w1.ncols() != c || w2.nrows() != c || w1.nrows() != w2.ncols() {
        return Err(Error::Config(format!(
            "gate shapes {:?}/{:?} do not fit {c} channels",
            w1.dim(),
            w2.dim()
        )));
    }
    let hw = (h * w) as f64;
    let a = Array1::from_iter((0..c).map(|ch| {
        fm.index_axis(ndarray::Axis(0), ch).sum() / hw
    }));
    let u1 = w1.dot(&a);
    let hvec = u1.mapv(|v| v.max(0.0));
    let z = w2.dot(&hvec).mapv(sigmoid);
    let mut out = fm.clone();
    for ch in 0..c {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|v| v * z[ch]);
    }
    Ok((out, ArfwCache { a, u1, h: hvec, z }))
}

/// Backward of [`arfw_forward`]: returns `(dW1, dW2, d_input)`.
pub fn arfw_backward(
    fm: &FeatureMap,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    cache: &ArfwCache,
    dout: &FeatureMap,
) -> Result<(Array2<f64>, Array2<f64>, FeatureMap)> {
    let (c, h, w) = fm.dim();
    if dout.dim() != fm.dim() {
        return Err(Error::Config("gate gradient dims do not match input".into()));
    }
    let hw = (h * w) as f64;
    // out_c = z_c · v_c: direct path into v, plus the gate path through z.
    let mut dz = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let v = fm.index_axis(ndarray::Axis(0), ch);
        let g = dout.index_axis(ndarray::Axis(0), ch);
        dz[ch] = v.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    }
    let du2 = Array1::from_iter((0..c).map(|ch| dz[ch] * cache.z[ch] * (1.0 - cache.z[ch])));
    let dw2 = {
        let mut m = Array2::<f64>::zeros(w2.dim());
        for i in 0..c {
            for j in 0..cache.h.len() {
                m[(i, j)] = du2[i] * cache.h[j];
            }
        }
        m
    };
    let dh = w2.t().dot(&du2);
    let du1 = Array1::from_iter(
        dh.iter()
            .zip(cache.u1.iter())
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 }),
    );
    let dw1 = {
        let mut m = Array2::<f64>::zeros(w1.dim());
        for i in 0..du1.len() {
            for j in 0..c {
                m[(i, j)] = du1[i] * cache.a[j];
            }
        }
        m
    };
    let da = w1.t().dot(&du1);
    let mut dfm = dout.clone();
    for ch in 0..c {
        let zc = cache.z[ch];
        let extra = da[ch] / hw;
        dfm.index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|g| g * zc + extra);
    }
    Ok((dw1, dw2, dfm))
}

/// Center pooling: `out_c(i,j) = max_j' fm_c(i,j') + max_i' fm_c(i',j)`.
pub fn center_pool(fm: &FeatureMap) -> FeatureMap {
    let (c, h, w) = fm.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let plane = fm.index_axis(ndarray::Axis(0), ch);
        let row_max: Vec<f64> = (0..h)
            .map(|i| plane.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let col_max: Vec<f64> = (0..w)
            .map(|j| plane.column(j).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] = row_max[i] + col_max[j];
            }
        }
    }
    out
}

/// Backward of [`center_pool`]: each row-max routes the row's summed
/// gradient to the first argmax of that row; column maxima likewise.
pub fn center_pool_backward(fm: &FeatureMap, dout: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = fm.dim();
    if dout.dim() != fm.dim() {
        return Err(Error::Config("pool gradient dims do not match input".into()));
    }
    let mut dfm = Array3::<f64>::zeros(fm.dim());
    for ch in 0..c {
        let plane = fm.index_axis(ndarray::Axis(0), ch);
        for i in 0..h {
            let mut arg = 0;
            for j in 1..w {
                if plane[(i, j)] > plane[(i, arg)] {
                    arg = j;
                }
            }
            let g: f64 = (0..w).map(|j| dout[(ch, i, j)]).sum();
            dfm[(ch, i, arg)] += g;
        }
        for j in 0..w {
            let mut arg = 0;
            for i in 1..h {
                if plane[(i, j)] > plane[(arg, j)] {
                    arg = i;
                }
            }
            let g: f64 = (0..h).map(|i| dout[(ch, i, j)]).sum();
            dfm[(ch, arg, j)] += g;
        }
    }
    Ok(dfm)
}

fn subsample2(fm: &FeatureMap) -> FeatureMap {
    let (c, h, w) = fm.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Array3::from_shape_fn((c, oh, ow), |(ch, i, j)| fm[(ch, 2 * i, 2 * j)])
}

fn subsample2_backward(full_dim: (usize, usize, usize), dout: &FeatureMap) -> FeatureMap {
    let mut dfm = Array3::<f64>::zeros(full_dim);
    let (c, oh, ow) = dout.dim();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                dfm[(ch, 2 * i, 2 * j)] = dout[(ch, i, j)];
            }
        }
    }
    dfm
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ObsCache {
    image: FeatureMap,
    s1_pre: FeatureMap,
    s1: FeatureMap,
    s2_pre: FeatureMap,
    s2: FeatureMap,
    m_out: FeatureMap,
    m_relu: FeatureMap,
    arfw: Option<ArfwCache>,
    gated: FeatureMap,
    pooled: FeatureMap,
    head_pre: FeatureMap,
    head: FeatureMap,
    flat: Array1<f64>,
}

/// Map one `h × w` frame to the `out_rows × out_cols` code matrix, keeping
/// every intermediate for [`obsnet_backward`].
pub fn obsnet_forward(
    cfg: &ObsConfig,
    params: &ObsParams,
    image: &Array2<f64>,
) -> Result<(Array2<f64>, ObsCache)> {
    cfg.validate()?;
    if image.dim() != cfg.frame {
        return Err(Error::Config(format!(
            "image dims {:?} do not match configured frame {:?}",
            image.dim(),
            cfg.frame
        )));
    }
    let (h, w) = cfg.frame;
    let mut img = Array3::<f64>::zeros((1, h, w));
    img.index_axis_mut(ndarray::Axis(0), 0).assign(image);

    let s1_pre = dilated_conv(&img, &params.stem1, 1)?;
    let s1 = relu(&s1_pre);
    let s2_pre = dilated_conv(&s1, &params.stem2, 1)?;
    let s2 = relu(&s2_pre);
    let dilations = cfg.effective_dilations();
    let m_out = mdcb_forward(&s2, &params.branch, &dilations)?;
    let m_relu = relu(&m_out);
    let (gated, arfw) = if cfg.use_arfw {
        let (g, c) = arfw_forward(&m_relu, &params.w1, &params.w2)?;
        (g, Some(c))
    } else {
        (m_relu.clone(), None)
    };
    let cp = if cfg.use_center_pool {
        center_pool(&gated)
    } else {
        gated.clone()
    };
    let pooled = subsample2(&cp);
    let head_pre = dilated_conv(&pooled, &params.head_conv, 1)?;
    let head = relu(&head_pre);
    let flat = Array1::from_iter(head.iter().cloned());
    let out_vec = params.fc_w.dot(&flat) + &params.fc_b;
    let out = Array2::from_shape_vec((cfg.out_rows, cfg.out_cols), out_vec.to_vec())
        .map_err(|e| Error::Config(format!("output reshape: {e}")))?;

    Ok((
        out,
        ObsCache {
            image: img,
            s1_pre,
            s1,
            s2_pre,
            s2,
            m_out,
            m_relu,
            arfw,
            gated,
            pooled,
            head_pre,
            head,
            flat,
        },
    ))
}

/// Gradients of a scalar loss with respect to every parameter, given
/// `delta_xhat = ∂loss/∂x̂`. The image is the network input, so nothing
/// propagates further upstream.
pub fn obsnet_backward(
    cfg: &ObsConfig,
    params: &ObsParams,
    cache: &ObsCache,
    delta_xhat: &Array2<f64>,
) -> Result<ObsGrads> {
    if delta_xhat.dim() != (cfg.out_rows, cfg.out_cols) {
        return Err(Error::Config(format!(
            "gradient dims {:?} do not match output {:?}",
            delta_xhat.dim(),
            (cfg.out_rows, cfg.out_cols)
        )));
    }
    let mut grads = ObsParams::zeros_like(params);

    let dout_vec = Array1::from_iter(delta_xhat.iter().cloned());
    // fc: out = W·flat + b
    for i in 0..dout_vec.len() {
        let g = dout_vec[i];
        if g != 0.0 {
            for j in 0..cache.flat.len() {
                grads.fc_w[(i, j)] += g * cache.flat[j];
            }
        }
        grads.fc_b[i] = g;
    }
    let dflat = params.fc_w.t().dot(&dout_vec);
    let dhead = Array3::from_shape_vec(cache.head.dim(), dflat.to_vec()).expect("shape");
    let dhead_pre = relu_backward(&cache.head_pre, &dhead);
    let (dk_head, dpooled) =
        dilated_conv_backward(&cache.pooled, &params.head_conv, 1, &dhead_pre)?;
    grads.head_conv = dk_head;

    let dcp = subsample2_backward(cache.gated.dim(), &dpooled);
    let dgated = if cfg.use_center_pool {
        center_pool_backward(&cache.gated, &dcp)?
    } else {
        dcp
    };
    let dm_relu = if cfg.use_arfw {
        let c = cache.arfw.as_ref().ok_or_else(|| {
            Error::Config("forward cache is missing the gate intermediates".into())
        })?;
        let (dw1, dw2, dv) = arfw_backward(&cache.m_relu, &params.w1, &params.w2, c, &dgated)?;
        grads.w1 = dw1;
        grads.w2 = dw2;
        dv
    } else {
        dgated
    };
    let dm_out = relu_backward(&cache.m_out, &dm_relu);
    let dilations = cfg.effective_dilations();
    let (dk_branch, ds2) = mdcb_backward(&cache.s2, &params.branch, &dilations, &dm_out)?;
    grads.branch = dk_branch;
    let ds2_pre = relu_backward(&cache.s2_pre, &ds2);
    let (dk_stem2, ds1) = dilated_conv_backward(&cache.s1, &params.stem2, 1, &ds2_pre)?;
    grads.stem2 = dk_stem2;
    let ds1_pre = relu_backward(&cache.s1_pre, &ds1);
    let (dk_stem1, _dimg) = dilated_conv_backward(&cache.image, &params.stem1, 1, &ds1_pre)?;
    grads.stem1 = dk_stem1;

    Ok(grads)
}
