//! Raw numeric kernels behind the heavyweight tape operations.
//!
//! Everything here is a pure function over flat row-major buffers; the tape
//! layer owns shape bookkeeping and gradient plumbing. Convolution and the
//! selective scan get hand-written backward passes because recording their
//! inner loops node-by-node would dominate both memory and runtime.

/// Shape metadata for a 3D convolution. Kernel layout is
/// (out_channels, in_channels/groups, k, k, k); volumes are (C, D, H, W).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3dMeta {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
}

impl Conv3dMeta {
    pub fn out_extent(in_extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        (in_extent + 2 * padding - kernel) / stride + 1
    }
}

pub fn conv3d_forward(x: &[f64], w: &[f64], m: &Conv3dMeta) -> Vec<f64> {
    let [id, ih, iw] = m.in_spatial;
    let [od, oh, ow] = m.out_spatial;
    let k = m.kernel;
    let cg = m.in_channels / m.groups;
    let og = m.out_channels / m.groups;
    let in_hw = ih * iw;
    let out_hw = oh * ow;
    let mut y = vec![0.0; m.out_channels * od * out_hw];

    for oc in 0..m.out_channels {
        let g = oc / og;
        let w_base = oc * cg * k * k * k;
        for oz in 0..od {
            let z0 = (oz * m.stride) as isize - m.padding as isize;
            for oy in 0..oh {
                let y0 = (oy * m.stride) as isize - m.padding as isize;
                for ox in 0..ow {
                    let x0 = (ox * m.stride) as isize - m.padding as isize;
                    let mut acc = 0.0;
                    for ic_l in 0..cg {
                        let ic = g * cg + ic_l;
                        let x_chan = ic * id * in_hw;
                        let w_chan = w_base + ic_l * k * k * k;
                        for kz in 0..k {
                            let z = z0 + kz as isize;
                            if z < 0 || z >= id as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let yy = y0 + ky as isize;
                                if yy < 0 || yy >= ih as isize {
                                    continue;
                                }
                                let x_row = x_chan + z as usize * in_hw + yy as usize * iw;
                                let w_row = w_chan + (kz * k + ky) * k;
                                for kx in 0..k {
                                    let xx = x0 + kx as isize;
                                    if xx < 0 || xx >= iw as isize {
                                        continue;
                                    }
                                    acc += w[w_row + kx] * x[x_row + xx as usize];
                                }
                            }
                        }
                    }
                    y[oc * od * out_hw + oz * out_hw + oy * ow + ox] = acc;
                }
            }
        }
    }
    y
}

/// Accumulates input and weight gradients for a 3D convolution.
/// Either output may be skipped by passing `None`.
pub fn conv3d_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    m: &Conv3dMeta,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let [id, ih, iw] = m.in_spatial;
    let [od, oh, ow] = m.out_spatial;
    let k = m.kernel;
    let cg = m.in_channels / m.groups;
    let og = m.out_channels / m.groups;
    let in_hw = ih * iw;
    let out_hw = oh * ow;

    for oc in 0..m.out_channels {
        let g = oc / og;
        let w_base = oc * cg * k * k * k;
        for oz in 0..od {
            let z0 = (oz * m.stride) as isize - m.padding as isize;
            for oy in 0..oh {
                let y0 = (oy * m.stride) as isize - m.padding as isize;
                for ox in 0..ow {
                    let x0 = (ox * m.stride) as isize - m.padding as isize;
                    let g_out = dy[oc * od * out_hw + oz * out_hw + oy * ow + ox];
                    if g_out == 0.0 {
                        continue;
                    }
                    for ic_l in 0..cg {
                        let ic = g * cg + ic_l;
                        let x_chan = ic * id * in_hw;
                        let w_chan = w_base + ic_l * k * k * k;
                        for kz in 0..k {
                            let z = z0 + kz as isize;
                            if z < 0 || z >= id as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let yy = y0 + ky as isize;
                                if yy < 0 || yy >= ih as isize {
                                    continue;
                                }
                                let x_row = x_chan + z as usize * in_hw + yy as usize * iw;
                                let w_row = w_chan + (kz * k + ky) * k;
                                for kx in 0..k {
                                    let xx = x0 + kx as isize;
                                    if xx < 0 || xx >= iw as isize {
                                        continue;
                                    }
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[x_row + xx as usize] += g_out * w[w_row + kx];
                                    }
                                    if let Some(dw) = dw.as_deref_mut() {
                                        dw[w_row + kx] += g_out * x[x_row + xx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour factor-2 upsample of a (C, D, H, W) volume.
pub fn upsample2x_forward(x: &[f64], c: usize, d: usize, h: usize, w: usize) -> Vec<f64> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut y = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[((ch * d + z) * h + yy) * w + xx];
                    for dz in 0..2 {
                        for dyy in 0..2 {
                            let row = ((ch * od + 2 * z + dz) * oh + 2 * yy + dyy) * ow + 2 * xx;
                            y[row] = v;
                            y[row + 1] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &[f64], c: usize, d: usize, h: usize, w: usize) -> Vec<f64> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut dx = vec![0.0; c * d * h * w];
    for ch in 0..c {
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dz in 0..2 {
                        for dyy in 0..2 {
                            let row = ((ch * od + 2 * z + dz) * oh + 2 * yy + dyy) * ow + 2 * xx;
                            acc += dy[row] + dy[row + 1];
                        }
                    }
                    dx[((ch * d + z) * h + yy) * w + xx] = acc;
                }
            }
        }
    }
    dx
}

/// Switch point between the closed-form ZOH input factor and its series
/// limit; below this |delta * a| the closed form is formally 0/0.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// The factor f(delta, a) with bbar_i = f(delta, a_i) * b_i, i.e.
/// (exp(delta*a) - 1) / a, continued through a -> 0 by its series.
#[inline]
pub fn zoh_input_factor(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    if z.abs() < ZOH_SERIES_THRESHOLD {
        delta * (1.0 + z / 2.0 + z * z / 6.0)
    } else {
        z.exp_m1() / a
    }
}

/// Series-branch value regardless of |delta * a|; exposed so tests can
/// compare both branches at the switch boundary.
#[inline]
pub fn zoh_input_factor_series(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    delta * (1.0 + z / 2.0 + z * z / 6.0)
}

/// Closed-form branch value regardless of |delta * a|.
#[inline]
pub fn zoh_input_factor_closed(delta: f64, a: f64) -> f64 {
    (delta * a).exp_m1() / a
}

/// Partial derivatives (df/ddelta, df/da) of [`zoh_input_factor`].
#[inline]
fn zoh_input_factor_grad(delta: f64, a: f64, abar: f64, f: f64) -> (f64, f64) {
    let z = delta * a;
    if z.abs() < ZOH_SERIES_THRESHOLD {
        // f = delta + delta^2 a / 2 + delta^3 a^2 / 6
        let df_dd = 1.0 + z + z * z / 2.0;
        let df_da = delta * delta * (0.5 + z / 3.0);
        (df_dd, df_da)
    } else {
        (abar, (delta * abar - f) / a)
    }
}

/// Per-channel selective scan over a serialized sequence.
///
/// For each channel c the recurrence over t = 0..L is
///   abar_i = exp(delta[t,c] * a[i])
///   bbar_i = f(delta[t,c], a[i]) * (b_dyn[t,i] + b_static[c,i])
///   h_i    = abar_i * h_i + bbar_i * u[t,c]
///   y[t,c] = sum_i (c_dyn[t,i] + c_static[c,i]) * h_i
///
/// Layouts: u, delta (L, C); b_dyn, c_dyn (L, N); b_static, c_static (C, N);
/// a (N). The state starts at zero.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_forward(
    u: &[f64],
    delta: &[f64],
    b_dyn: &[f64],
    c_dyn: &[f64],
    b_static: &[f64],
    c_static: &[f64],
    a: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; len * channels];
    let mut h = vec![0.0; state];
    for c in 0..channels {
        h.iter_mut().for_each(|v| *v = 0.0);
        let b_st = &b_static[c * state..(c + 1) * state];
        let c_st = &c_static[c * state..(c + 1) * state];
        for t in 0..len {
            let d = delta[t * channels + c];
            let x = u[t * channels + c];
            let b_dy = &b_dyn[t * state..(t + 1) * state];
            let c_dy = &c_dyn[t * state..(t + 1) * state];
            let mut acc = 0.0;
            for i in 0..state {
                let z = d * a[i];
                let em = z.exp_m1();
                let abar = em + 1.0;
                let f = if z.abs() < ZOH_SERIES_THRESHOLD {
                    d * (1.0 + z / 2.0 + z * z / 6.0)
                } else {
                    em / a[i]
                };
                let bbar = f * (b_dy[i] + b_st[i]);
                h[i] = abar * h[i] + bbar * x;
                acc += (c_dy[i] + c_st[i]) * h[i];
            }
            y[t * channels + c] = acc;
        }
    }
    y
}

/// Gradient buffers for [`selective_scan_forward`], matching input layouts.
pub struct SelectiveScanGrads {
    pub du: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub db_dyn: Vec<f64>,
    pub dc_dyn: Vec<f64>,
    pub db_static: Vec<f64>,
    pub dc_static: Vec<f64>,
    pub da: Vec<f64>,
}

/// Reverse pass for the selective scan. Recomputes the forward state
/// trajectory per channel (storing h, abar and f) and runs the adjoint
/// recurrence backwards.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward(
    dy: &[f64],
    u: &[f64],
    delta: &[f64],
    b_dyn: &[f64],
    c_dyn: &[f64],
    b_static: &[f64],
    c_static: &[f64],
    a: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> SelectiveScanGrads {
    let mut g = SelectiveScanGrads {
        du: vec![0.0; len * channels],
        ddelta: vec![0.0; len * channels],
        db_dyn: vec![0.0; len * state],
        dc_dyn: vec![0.0; len * state],
        db_static: vec![0.0; channels * state],
        dc_static: vec![0.0; channels * state],
        da: vec![0.0; state],
    };
    // Per-channel trajectory: h has L+1 rows (h[0] = 0), abar/f have L rows.
    let mut h = vec![0.0; (len + 1) * state];
    let mut abar_tr = vec![0.0; len * state];
    let mut f_tr = vec![0.0; len * state];
    let mut dh = vec![0.0; state];

    for c in 0..channels {
        let b_st = &b_static[c * state..(c + 1) * state];
        let c_st = &c_static[c * state..(c + 1) * state];

        // Forward replay.
        h[..state].iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let d = delta[t * channels + c];
            let x = u[t * channels + c];
            let b_dy = &b_dyn[t * state..(t + 1) * state];
            for i in 0..state {
                let z = d * a[i];
                let em = z.exp_m1();
                let abar = em + 1.0;
                let f = if z.abs() < ZOH_SERIES_THRESHOLD {
                    d * (1.0 + z / 2.0 + z * z / 6.0)
                } else {
                    em / a[i]
                };
                abar_tr[t * state + i] = abar;
                f_tr[t * state + i] = f;
                h[(t + 1) * state + i] = abar * h[t * state + i] + f * (b_dy[i] + b_st[i]) * x;
            }
        }

        // Adjoint sweep.
        dh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let d = delta[t * channels + c];
            let x = u[t * channels + c];
            let gy = dy[t * channels + c];
            let b_dy = &b_dyn[t * state..(t + 1) * state];
            let c_dy = &c_dyn[t * state..(t + 1) * state];
            let mut ddelta_acc = 0.0;
            let mut du_acc = 0.0;
            for i in 0..state {
                let h_next = h[(t + 1) * state + i];
                let h_prev = h[t * state + i];
                let abar = abar_tr[t * state + i];
                let f = f_tr[t * state + i];
                let b_tot = b_dy[i] + b_st[i];

                // y_t contribution.
                g.dc_dyn[t * state + i] += gy * h_next;
                g.dc_static[c * state + i] += gy * h_next;
                let dhi = dh[i] + gy * (c_dy[i] + c_st[i]);

                // h_t = abar * h_{t-1} + f * b_tot * x
                let dabar = dhi * h_prev;
                let dbbar = dhi * x;
                du_acc += dhi * f * b_tot;
                dh[i] = dhi * abar;

                let db_tot = dbbar * f;
                g.db_dyn[t * state + i] += db_tot;
                g.db_static[c * state + i] += db_tot;

                let df = dbbar * b_tot;
                let (df_dd, df_da) = zoh_input_factor_grad(d, a[i], abar, f);
                ddelta_acc += dabar * a[i] * abar + df * df_dd;
                g.da[i] += dabar * d * abar + df * df_da;
            }
            g.ddelta[t * channels + c] += ddelta_acc;
            g.du[t * channels + c] += du_acc;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let m = Conv3dMeta {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
            in_spatial: [4, 4, 4],
            out_spatial: [4, 4, 4],
        };
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let y = conv3d_forward(&x, &[1.0], &m);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_sums_cube() {
        let m = Conv3dMeta {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
            groups: 1,
            in_spatial: [3, 3, 3],
            out_spatial: [1, 1, 1],
        };
        let y = conv3d_forward(&vec![1.0; 27], &vec![1.0; 27], &m);
        assert_eq!(y, vec![27.0]);
    }

    #[test]
    fn upsample_round_trip_sums() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = upsample2x_forward(&x, 1, 2, 2, 2);
        assert_eq!(y.len(), 64);
        // Constant blocks.
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 1.0);
        let dx = upsample2x_backward(&vec![1.0; 64], 1, 2, 2, 2);
        assert_eq!(dx, vec![8.0; 8]);
    }

    #[test]
    fn zoh_branches_agree_at_boundary() {
        for &sign in &[1.0, -1.0] {
            let a = sign * 1.0;
            let delta = 1e-6;
            let closed = zoh_input_factor_closed(delta, a);
            let series = zoh_input_factor_series(delta, a);
            let rel = (closed - series).abs() / closed.abs();
            assert!(rel < 1e-10, "rel={rel}");
        }
    }
}
