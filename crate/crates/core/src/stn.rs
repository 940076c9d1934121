//! Differentiable spatial transformer: grid generation from a group element and
//! bilinear sampling, both recorded on the tape.
//!
//! Conventions:
//! - pixel `j` of an axis with `n` pixels sits at normalized coordinate `-1 + (2j + 1) / n`;
//! - warping is inverse: output pixel `p` reads the input at `exp(tau)^-1 p`, so the
//!   content of the image moves by `exp(tau)`;
//! - samples that fall outside the image read zero.

use crate::graphcore::{BackwardCtx, Graph, GraphError, Op, Tensor, Var};
use crate::lie::{exp_theta_jacobian, AlgebraCoefficients, GroupElement, GroupKind};
use crate::scalar::Scalar;

/// Pixel-space sample positions closer than this to an integer are snapped to it,
/// so lattice-preserving transforms reproduce pixels exactly.
pub const SNAP: f64 = 1e-9;

/// Normalized coordinate of pixel `j` on an axis of `n` pixels.
pub fn pixel_center<S: Scalar>(j: usize, n: usize) -> S {
    S::lit(-1.0 + (2 * j + 1) as f64 / n as f64)
}

/// Source coordinates, one `(x, y)` pair per output pixel in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<S> {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<(S, S)>,
}

impl<S: Scalar> SamplingGrid<S> {
    /// The untransformed pixel-center lattice.
    pub fn lattice(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|i| (0..width).map(move |j| (pixel_center(j, width), pixel_center(i, height))))
            .collect();
        SamplingGrid {
            height,
            width,
            coords,
        }
    }

    fn to_tensor(&self) -> Tensor<S> {
        let data = self.coords.iter().flat_map(|&(x, y)| [x, y]).collect();
        Tensor::from_parts(vec![1, self.height, self.width, 2], data)
    }
}

/// Grid for warping by `m`: each output pixel center `p` maps to source `m^-1 p`.
pub fn generate_grid<S: Scalar>(m: &GroupElement<S>, height: usize, width: usize) -> SamplingGrid<S> {
    let inv = m.invert();
    let mut grid = SamplingGrid::lattice(height, width);
    for c in &mut grid.coords {
        *c = inv.apply(c.0, c.1);
    }
    grid
}

#[inline]
fn to_pixel<S: Scalar>(coord: S, n: usize) -> S {
    let p = ((coord + S::one()) * S::lit(n as f64) - S::one()) * S::lit(0.5);
    let r = p.round();
    if (p - r).abs() < S::lit(SNAP) {
        r
    } else {
        p
    }
}

/// Bilinear footprint of one sample: top-left corner and fractional offsets.
#[inline]
fn footprint<S: Scalar>(x: S, y: S, h: usize, w: usize) -> (isize, isize, S, S) {
    let (px, py) = (to_pixel(x, w), to_pixel(y, h));
    let (fx, fy) = (px.floor(), py.floor());
    (
        fx.to_isize().unwrap_or(isize::MIN / 2),
        fy.to_isize().unwrap_or(isize::MIN / 2),
        px - fx,
        py - fy,
    )
}

#[inline]
fn at<S: Scalar>(plane: &[S], h: usize, w: usize, row: isize, col: isize) -> S {
    if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
        S::zero()
    } else {
        plane[row as usize * w + col as usize]
    }
}

// ── Tape ops ─────────────────────────────────────────────────────────

/// `tau (B, k) -> theta (B, 6)` of the inverse warp `exp(-tau)`.
struct InverseTheta {
    kind: GroupKind,
}

fn coefficients_row<S: Scalar>(row: &[S], kind: GroupKind) -> AlgebraCoefficients<S> {
    match kind {
        GroupKind::So2 => AlgebraCoefficients::rotation(row[0]),
        GroupKind::Se2 => AlgebraCoefficients::new(row[0], row[1], row[2]),
    }
}

impl<S: Scalar> Op<S> for InverseTheta {
    fn name(&self) -> &'static str {
        "inverse_theta"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let tau = ctx.inputs[0];
        let k = self.kind.dim();
        let mut out = vec![S::zero(); tau.numel()];
        for (b, row) in tau.data().chunks(k).enumerate() {
            let (_, jac) = exp_theta_jacobian(&coefficients_row(row, self.kind).neg());
            let g = &ctx.grad.data()[b * 6..b * 6 + 6];
            for j in 0..k {
                // d/dtau = -d/d(-tau)
                out[b * k + j] = -(0..6).map(|i| g[i] * jac[j][i]).sum::<S>();
            }
        }
        vec![Some(Tensor::from_parts(tau.shape().to_vec(), out))]
    }
}

/// `theta (B, 6) -> grid (B, H, W, 2)` by applying each affine map to the lattice.
struct AffineGrid {
    height: usize,
    width: usize,
}

impl<S: Scalar> Op<S> for AffineGrid {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let theta = ctx.inputs[0];
        let batch = theta.shape()[0];
        let lattice = SamplingGrid::<S>::lattice(self.height, self.width);
        let pix = self.height * self.width;
        let g = ctx.grad.data();
        let mut out = vec![S::zero(); batch * 6];
        for b in 0..batch {
            let d = &mut out[b * 6..b * 6 + 6];
            for (i, &(x, y)) in lattice.coords.iter().enumerate() {
                let (gx, gy) = (g[(b * pix + i) * 2], g[(b * pix + i) * 2 + 1]);
                d[0] += gx * x;
                d[1] += gx * y;
                d[2] += gx;
                d[3] += gy * x;
                d[4] += gy * y;
                d[5] += gy;
            }
        }
        vec![Some(Tensor::from_parts(vec![batch, 6], out))]
    }
}

struct GridSample;

impl<S: Scalar> Op<S> for GridSample {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (image, grid) = (ctx.inputs[0], ctx.inputs[1]);
        let [batch, channels, h, w] = image.shape()[..] else {
            unreachable!("checked at record time")
        };
        let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
        let pix = ho * wo;
        let g = ctx.grad.data();
        let mut d_image = ctx.needs[0].then(|| vec![S::zero(); image.numel()]);
        let mut d_grid = ctx.needs[1].then(|| vec![S::zero(); grid.numel()]);
        let (half_w, half_h) = (S::lit(w as f64 * 0.5), S::lit(h as f64 * 0.5));
        for b in 0..batch {
            for i in 0..pix {
                let gi = (b * pix + i) * 2;
                let (x0, y0, wx, wy) = footprint(grid.data()[gi], grid.data()[gi + 1], h, w);
                let (ux, uy) = (S::one() - wx, S::one() - wy);
                let mut dpx = S::zero();
                let mut dpy = S::zero();
                for c in 0..channels {
                    let plane_off = (b * channels + c) * h * w;
                    let go = g[(b * channels + c) * pix + i];
                    if let Some(di) = d_image.as_mut() {
                        for (row, col, weight) in [
                            (y0, x0, ux * uy),
                            (y0, x0 + 1, wx * uy),
                            (y0 + 1, x0, ux * wy),
                            (y0 + 1, x0 + 1, wx * wy),
                        ] {
                            if row >= 0 && col >= 0 && row < h as isize && col < w as isize {
                                di[plane_off + row as usize * w + col as usize] += go * weight;
                            }
                        }
                    }
                    if d_grid.is_some() {
                        let plane = &image.data()[plane_off..plane_off + h * w];
                        let v00 = at(plane, h, w, y0, x0);
                        let v01 = at(plane, h, w, y0, x0 + 1);
                        let v10 = at(plane, h, w, y0 + 1, x0);
                        let v11 = at(plane, h, w, y0 + 1, x0 + 1);
                        dpx += go * (uy * (v01 - v00) + wy * (v11 - v10));
                        dpy += go * (ux * (v10 - v00) + wx * (v11 - v01));
                    }
                }
                if let Some(dg) = d_grid.as_mut() {
                    dg[gi] = dpx * half_w;
                    dg[gi + 1] = dpy * half_h;
                }
            }
        }
        vec![
            d_image.map(|d| Tensor::from_parts(image.shape().to_vec(), d)),
            d_grid.map(|d| Tensor::from_parts(grid.shape().to_vec(), d)),
        ]
    }
}

impl<S: Scalar> Graph<S> {
    /// Affine parameters of `exp(tau)^-1` for each row of `tau: (B, kind.dim())`.
    pub fn inverse_theta(&mut self, tau: Var, kind: GroupKind) -> Result<Var, GraphError> {
        let shape = self.shape(tau).to_vec();
        if shape.len() != 2 || shape[1] != kind.dim() {
            return Err(GraphError::Shape {
                op: "inverse_theta",
                detail: format!("expected (batch, {}) for {}, got {:?}", kind.dim(), kind, shape),
            });
        }
        let data = self
            .value(tau)
            .data()
            .chunks(kind.dim())
            .flat_map(|row| exp_theta_jacobian(&coefficients_row(row, kind).neg()).0)
            .collect();
        self.record(&[tau], Tensor::from_parts(vec![shape[0], 6], data), InverseTheta { kind })
    }

    /// Source coordinates `(B, H, W, 2)` of the pixel-center lattice under each affine map `theta: (B, 6)`.
    pub fn affine_grid(&mut self, theta: Var, height: usize, width: usize) -> Result<Var, GraphError> {
        let shape = self.shape(theta).to_vec();
        if shape.len() != 2 || shape[1] != 6 {
            return Err(GraphError::Shape {
                op: "affine_grid",
                detail: format!("expected (batch, 6), got {:?}", shape),
            });
        }
        let lattice = SamplingGrid::<S>::lattice(height, width);
        let mut data = Vec::with_capacity(shape[0] * height * width * 2);
        for t in self.value(theta).data().chunks(6) {
            for &(x, y) in &lattice.coords {
                data.push(t[0] * x + t[1] * y + t[2]);
                data.push(t[3] * x + t[4] * y + t[5]);
            }
        }
        self.record(
            &[theta],
            Tensor::from_parts(vec![shape[0], height, width, 2], data),
            AffineGrid { height, width },
        )
    }

    /// Bilinear sampling of `image: (B, C, H, W)` at `grid: (B, Ho, Wo, 2)` normalized coordinates.
    pub fn grid_sample(&mut self, image: Var, grid: Var) -> Result<Var, GraphError> {
        let (ishape, gshape) = (self.shape(image).to_vec(), self.shape(grid).to_vec());
        let ([batch, channels, h, w], [gb, ho, wo, 2]) = (&ishape[..], &gshape[..]) else {
            return Err(GraphError::Shape {
                op: "grid_sample",
                detail: format!("image {:?} with grid {:?}", ishape, gshape),
            });
        };
        let (batch, channels, h, w, ho, wo) = (*batch, *channels, *h, *w, *ho, *wo);
        if *gb != batch {
            return Err(GraphError::Shape {
                op: "grid_sample",
                detail: format!("image batch {} vs grid batch {}", batch, gb),
            });
        }
        let pix = ho * wo;
        let (img, grd) = (self.value(image).data(), self.value(grid).data());
        let mut out = vec![S::zero(); batch * channels * pix];
        for b in 0..batch {
            for i in 0..pix {
                let gi = (b * pix + i) * 2;
                let (x0, y0, wx, wy) = footprint(grd[gi], grd[gi + 1], h, w);
                let (ux, uy) = (S::one() - wx, S::one() - wy);
                for c in 0..channels {
                    let plane = &img[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    out[(b * channels + c) * pix + i] = ux * uy * at(plane, h, w, y0, x0)
                        + wx * uy * at(plane, h, w, y0, x0 + 1)
                        + ux * wy * at(plane, h, w, y0 + 1, x0)
                        + wx * wy * at(plane, h, w, y0 + 1, x0 + 1);
                }
            }
        }
        self.record(
            &[image, grid],
            Tensor::from_parts(vec![batch, channels, ho, wo], out),
            GridSample,
        )
    }

    /// Warps each image by `exp(tau_b)`; differentiable in both the image and `tau`.
    pub fn transform_image(&mut self, x: Var, tau: Var, kind: GroupKind) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(GraphError::Shape {
                op: "transform_image",
                detail: format!("expected (batch, channels, height, width), got {:?}", shape),
            });
        }
        let theta = self.inverse_theta(tau, kind)?;
        let grid = self.affine_grid(theta, shape[2], shape[3])?;
        self.grid_sample(x, grid)
    }
}

/// Samples `image: (B, C, H, W)` at a fixed grid shared by the whole batch, without recording gradients.
pub fn bilinear_sample<S: Scalar>(image: &Tensor<S>, grid: &SamplingGrid<S>) -> Result<Tensor<S>, GraphError> {
    let batch = image.shape().first().copied().unwrap_or(0);
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let one = grid.to_tensor();
    let mut data = Vec::with_capacity(batch * one.numel());
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    let grid_var = g.constant(Tensor::from_parts(vec![batch, grid.height, grid.width, 2], data));
    let out = g.grid_sample(x, grid_var)?;
    Ok(g.value(out).clone())
}

/// Warps each image by its own coefficients, without recording gradients.
pub fn transform_images<S: Scalar>(
    x: &Tensor<S>,
    taus: &[AlgebraCoefficients<S>],
    kind: GroupKind,
) -> Result<Tensor<S>, GraphError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let rows: Vec<S> = taus.iter().flat_map(|t| t.to_vec(kind)).collect();
    let tau = g.constant(Tensor::new(vec![taus.len(), kind.dim()], rows)?);
    let out = g.transform_image(xv, tau, kind)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphcore::{grad_check, GradCheckConfig};
    use crate::lie::exp_map;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, h, w], (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_grid_is_lattice() {
        let grid = generate_grid(&GroupElement::<f64>::identity(), 3, 4);
        assert_eq!(grid, SamplingGrid::lattice(3, 4));
        assert!((grid.coords[0].0 + 0.75).abs() < 1e-15);
        assert!((grid.coords[0].1 + 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn translation_grid_shifts_source_back() {
        let m = GroupElement::from_angle_translation(0.0, 0.25, 0.0);
        let grid = generate_grid(&m, 4, 4);
        for (g, l) in grid.coords.iter().zip(SamplingGrid::<f64>::lattice(4, 4).coords) {
            assert!((g.0 - (l.0 - 0.25)).abs() < 1e-15);
            assert_eq!(g.1, l.1);
        }
    }

    #[test]
    fn quarter_turn_grid() {
        let m = exp_map(&AlgebraCoefficients::rotation(FRAC_PI_2), GroupKind::So2).unwrap();
        let grid = generate_grid(&m, 4, 4);
        for (g, (x, y)) in grid.coords.iter().zip(SamplingGrid::<f64>::lattice(4, 4).coords) {
            assert!((g.0 - y).abs() < 1e-15 && (g.1 + x).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_sampling_is_exact() {
        let img = image(5, 7, 1);
        let out = bilinear_sample(&img, &SamplingGrid::lattice(5, 7)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn center_of_four_pixels_averages() {
        let img = Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SamplingGrid {
            height: 1,
            width: 1,
            coords: vec![(0.0, 0.0)],
        };
        assert_eq!(bilinear_sample(&img, &grid).unwrap().data(), &[1.5]);
    }

    #[test]
    fn integer_translation_matches_index_shift() {
        let (h, w) = (6, 8);
        let img = image(h, w, 2);
        for (dx, dy) in [(1i64, 0i64), (-2, 1), (3, -2), (0, 0)] {
            let tau = AlgebraCoefficients::new(0.0, 2.0 * dx as f64 / w as f64, 2.0 * dy as f64 / h as f64);
            let out = transform_images(&img, &[tau], GroupKind::Se2).unwrap();
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let (sr, sc) = (r - dy, c - dx);
                    let expected = if (0..h as i64).contains(&sr) && (0..w as i64).contains(&sc) {
                        img.data()[(sr * w as i64 + sc) as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(out.data()[(r * w as i64 + c) as usize], expected, "shift ({dx},{dy}) at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn quarter_turn_rotates_array() {
        let n = 5;
        let img = image(n, n, 3);
        let tau = AlgebraCoefficients::rotation(FRAC_PI_2);
        let out = transform_images(&img, &[tau], GroupKind::So2).unwrap();
        // Output (r, c) reads the source at M^-1 p: (x, y) -> (y, -x), i.e. row n-1-c, column r.
        for r in 0..n {
            for c in 0..n {
                assert_eq!(out.data()[r * n + c], img.data()[(n - 1 - c) * n + r]);
            }
        }
    }

    #[test]
    fn translation_round_trip_on_interior() {
        let (h, w) = (12, 12);
        let img = image(h, w, 4);
        for k in [1i32, 2, -3] {
            let u = 2.0 * k as f64 / w as f64;
            let there = transform_images(&img, &[AlgebraCoefficients::new(0.0, u, 0.0)], GroupKind::Se2).unwrap();
            let back = transform_images(&there, &[AlgebraCoefficients::new(0.0, -u, 0.0)], GroupKind::Se2).unwrap();
            let margin = k.unsigned_abs() as usize;
            for r in 0..h {
                for c in margin..w - margin {
                    assert!((back.data()[r * w + c] - img.data()[r * w + c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_tau_leaves_image_unchanged() {
        let img = image(7, 7, 5);
        let out = transform_images(&img, &[AlgebraCoefficients::zero()], GroupKind::Se2).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn gradient_wrt_tau_and_image() {
        let img = image(6, 6, 6);
        // Offsets keep every sample away from integer pixel positions.
        let tau = Tensor::from_f64(&[2, 3], &[0.137, 0.0731, -0.0519, -0.291, -0.113, 0.0877]).unwrap();
        let mut imgs = img.data().to_vec();
        imgs.extend(image(6, 6, 7).data());
        let batch_img = Tensor::new(vec![2, 1, 6, 6], imgs).unwrap();
        let weights = image(6, 6, 8);
        let report = grad_check(
            &[batch_img, tau],
            |g, v| {
                let out = g.transform_image(v[0], v[1], GroupKind::Se2)?;
                let w = g.constant(weights.clone().reshaped(vec![1, 6, 6]).unwrap());
                let weighted = g.mul(out, w)?;
                g.sum(weighted)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn so2_gradient() {
        let img = image(5, 5, 9);
        let tau = Tensor::from_f64(&[1, 1], &[0.4123]).unwrap();
        let report = grad_check(
            &[tau],
            |g, v| {
                let x = g.constant(img.clone());
                let out = g.transform_image(x, v[0], GroupKind::So2)?;
                let sq = g.square(out)?;
                g.sum(sq)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #[test]
        fn sampling_is_linear_in_the_image(
            a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000,
            w in -1.5f64..1.5, u in -0.5f64..0.5, v in -0.5f64..0.5,
        ) {
            let (u1, u2) = (image(6, 6, seed), image(6, 6, seed + 1));
            let m = exp_map(&AlgebraCoefficients::new(w, u, v), GroupKind::Se2).unwrap();
            let grid = generate_grid(&m, 6, 6);
            let mix = Tensor::new(
                vec![1, 1, 6, 6],
                u1.data().iter().zip(u2.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = bilinear_sample(&mix, &grid).unwrap();
            let (s1, s2) = (bilinear_sample(&u1, &grid).unwrap(), bilinear_sample(&u2, &grid).unwrap());
            for i in 0..36 {
                prop_assert!((lhs.data()[i] - (a * s1.data()[i] + b * s2.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn sampling_never_overshoots(seed in 0u64..1000, w in -3.0f64..3.0, u in -0.9f64..0.9, v in -0.9f64..0.9) {
            let img = image(7, 7, seed);
            let (lo, hi) = img.data().iter().fold((0.0f64, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
            let m = exp_map(&AlgebraCoefficients::new(w, u, v), GroupKind::Se2).unwrap();
            let out = bilinear_sample(&img, &generate_grid(&m, 7, 7)).unwrap();
            for &x in out.data() {
                prop_assert!(x >= lo - 1e-15 && x <= hi + 1e-15);
            }
        }
    }
}
