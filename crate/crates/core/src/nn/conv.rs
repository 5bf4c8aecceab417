use rand::Rng;

use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::real::{gemm, Real, Strides};
use crate::tensor::Tensor;

/// Upper bound on im2col buffer entries per chunk.
const COLUMN_BUDGET: usize = 1 << 17;

/// 3D convolution with cubic kernel, computed as chunked im2col + GEMM.
#[derive(Clone, Debug)]
pub struct Conv3d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cached_input: Option<Tensor<F>>,
}

impl<F: Real> Conv3d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k3 = kernel * kernel * kernel;
        let weight = Param::kaiming(
            vec![out_channels, in_channels, kernel, kernel, kernel],
            in_channels * k3,
            rng,
        );
        Self {
            weight,
            bias: bias.then(|| Param::filled(vec![out_channels], F::zero())),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding;
            if padded < self.kernel || (padded - self.kernel) % self.stride != 0 {
                return Err(Error::Shape(format!(
                    "conv k={} s={} p={} does not tile input {:?}",
                    self.kernel, self.stride, self.padding, input
                )));
            }
            out[a] = (padded - self.kernel) / self.stride + 1;
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<[usize; 3]> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        self.output_dims(x.dims())
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let od = self.check_input(x)?;
        let mut y = Tensor::zeros(x.batch(), self.out_channels, od);
        let vout = y.voxels();
        let taps = self.taps();
        let w = &self.weight.value;
        for n in 0..x.batch() {
            let xs = x.sample(n);
            let ys = y.sample_mut(n);
            if self.is_pointwise() {
                gemm(
                    self.out_channels,
                    taps,
                    vout,
                    F::one(),
                    w,
                    Strides::row_major(taps),
                    xs,
                    Strides::row_major(vout),
                    F::zero(),
                    ys,
                    Strides::row_major(vout),
                );
            } else {
                let geo = Geometry::new(self, x.dims(), od);
                let mut cols = Vec::new();
                for (z0, z1) in geo.chunks() {
                    let cn = geo.im2col(xs, z0, z1, &mut cols);
                    let start = z0 * geo.plane;
                    gemm(
                        self.out_channels,
                        taps,
                        cn,
                        F::one(),
                        w,
                        Strides::row_major(taps),
                        &cols,
                        Strides::row_major(cn),
                        F::zero(),
                        &mut ys[start..],
                        Strides::row_major(vout),
                    );
                }
            }
            if let Some(b) = &self.bias {
                for (c, &bv) in b.value.iter().enumerate() {
                    ys[c * vout..(c + 1) * vout].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.forward(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self
            .cached_input
            .take()
            .expect("Conv3d::backward without forward_train");
        let od = dy.dims();
        let vout = dy.voxels();
        let taps = self.taps();
        let mut dx = Tensor::zeros(x.batch(), self.in_channels, x.dims());
        for n in 0..x.batch() {
            let xs = x.sample(n);
            let dys = dy.sample(n);
            let dxs = dx.sample_mut(n);
            if let Some(b) = &mut self.bias {
                for (c, g) in b.grad.iter_mut().enumerate() {
                    *g += dys[c * vout..(c + 1) * vout].iter().copied().sum::<F>();
                }
            }
            if self.is_pointwise() {
                // dW += dY · Xᵀ ; dX = Wᵀ · dY
                gemm(
                    self.out_channels,
                    vout,
                    taps,
                    F::one(),
                    dys,
                    Strides::row_major(vout),
                    xs,
                    Strides::row_major(vout).transposed(),
                    F::one(),
                    &mut self.weight.grad,
                    Strides::row_major(taps),
                );
                gemm(
                    taps,
                    self.out_channels,
                    vout,
                    F::one(),
                    &self.weight.value,
                    Strides::row_major(taps).transposed(),
                    dys,
                    Strides::row_major(vout),
                    F::zero(),
                    dxs,
                    Strides::row_major(vout),
                );
                continue;
            }
            let geo = Geometry::new(self, x.dims(), od);
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for (z0, z1) in geo.chunks() {
                let cn = geo.im2col(xs, z0, z1, &mut cols);
                let start = z0 * geo.plane;
                gemm(
                    self.out_channels,
                    cn,
                    taps,
                    F::one(),
                    &dys[start..],
                    Strides::row_major(vout),
                    &cols,
                    Strides::row_major(cn).transposed(),
                    F::one(),
                    &mut self.weight.grad,
                    Strides::row_major(taps),
                );
                dcols.clear();
                dcols.resize(taps * cn, F::zero());
                gemm(
                    taps,
                    self.out_channels,
                    cn,
                    F::one(),
                    &self.weight.value,
                    Strides::row_major(taps).transposed(),
                    &dys[start..],
                    Strides::row_major(vout),
                    F::zero(),
                    &mut dcols,
                    Strides::row_major(cn),
                );
                geo.col2im(&dcols, z0, z1, dxs);
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for Conv3d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Index bookkeeping shared by im2col and col2im.
struct Geometry {
    cin: usize,
    k: usize,
    s: usize,
    p: usize,
    inp: [usize; 3],
    out: [usize; 3],
    plane: usize,
    planes_per_chunk: usize,
}

impl Geometry {
    fn new<F: Real>(conv: &Conv3d<F>, inp: [usize; 3], out: [usize; 3]) -> Self {
        let plane = out[0] * out[1];
        let taps = conv.taps();
        let planes_per_chunk = (COLUMN_BUDGET / (taps * plane).max(1)).clamp(1, out[2]);
        Self {
            cin: conv.in_channels,
            k: conv.kernel,
            s: conv.stride,
            p: conv.padding,
            inp,
            out,
            plane,
            planes_per_chunk,
        }
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.out[2])
            .step_by(self.planes_per_chunk)
            .map(move |z0| (z0, (z0 + self.planes_per_chunk).min(self.out[2])))
    }

    /// Input coordinate for output coordinate `o` and tap `t`, if inside.
    #[inline]
    fn source(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let i = (o * self.s + t).checked_sub(self.p)?;
        (i < self.inp[axis]).then_some(i)
    }

    /// Valid output x-range `[lo, hi)` for tap `kx`.
    #[inline]
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.p {
            0
        } else {
            (self.p - kx).div_ceil(self.s)
        };
        // need ox*s + kx - p < nx  <=>  ox*s < nx + p - kx
        let lim = self.inp[0] + self.p;
        let hi = if lim <= kx {
            0
        } else {
            (lim - kx).div_ceil(self.s).min(self.out[0])
        };
        (lo.min(hi), hi)
    }

    fn im2col<F: Real>(&self, x: &[F], z0: usize, z1: usize, cols: &mut Vec<F>) -> usize {
        let cn = (z1 - z0) * self.plane;
        let taps = self.cin * self.k * self.k * self.k;
        cols.clear();
        cols.resize(taps * cn, F::zero());
        let [nx, ny, nz] = self.inp;
        let vin = nx * ny * nz;
        let [ox_n, oy_n, _] = self.out;
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * vin..(ci + 1) * vin];
            for kz in 0..self.k {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let dst_row = &mut cols[row * cn..(row + 1) * cn];
                        let (lo, hi) = self.x_range(kx);
                        for oz in z0..z1 {
                            let Some(iz) = self.source(oz, kz, 2) else { continue };
                            for oy in 0..oy_n {
                                let Some(iy) = self.source(oy, ky, 1) else { continue };
                                let src = (iz * ny + iy) * nx;
                                let dst = (oz - z0) * self.plane + oy * ox_n;
                                if self.s == 1 {
                                    let ix0 = lo + kx - self.p;
                                    dst_row[dst + lo..dst + hi]
                                        .copy_from_slice(&xc[src + ix0..src + ix0 + hi - lo]);
                                } else {
                                    for ox in lo..hi {
                                        dst_row[dst + ox] = xc[src + ox * self.s + kx - self.p];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cn
    }

    fn col2im<F: Real>(&self, cols: &[F], z0: usize, z1: usize, dx: &mut [F]) {
        let cn = (z1 - z0) * self.plane;
        let [nx, ny, nz] = self.inp;
        let vin = nx * ny * nz;
        let [ox_n, oy_n, _] = self.out;
        let mut row = 0;
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * vin..(ci + 1) * vin];
            for kz in 0..self.k {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let src_row = &cols[row * cn..(row + 1) * cn];
                        let (lo, hi) = self.x_range(kx);
                        for oz in z0..z1 {
                            let Some(iz) = self.source(oz, kz, 2) else { continue };
                            for oy in 0..oy_n {
                                let Some(iy) = self.source(oy, ky, 1) else { continue };
                                let dst = (iz * ny + iy) * nx;
                                let src = (oz - z0) * self.plane + oy * ox_n;
                                for ox in lo..hi {
                                    dxc[dst + ox * self.s + kx - self.p] += src_row[src + ox];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d<F> {
    /// Shape `[in, out, 2, 2, 2]`.
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_channels: usize,
    out_channels: usize,
    cached_input: Option<Tensor<F>>,
}

impl<F: Real> ConvTranspose3d<F> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming(vec![in_channels, out_channels, 2, 2, 2], in_channels, rng),
            bias: bias.then(|| Param::filled(vec![out_channels], F::zero())),
            in_channels,
            out_channels,
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "transposed conv expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let [nx, ny, nz] = x.dims();
        let od = [2 * nx, 2 * ny, 2 * nz];
        let vin = x.voxels();
        let rows = self.out_channels * 8;
        let mut y = Tensor::zeros(x.batch(), self.out_channels, od);
        let vout = y.voxels();
        let mut cols = vec![F::zero(); rows * vin];
        for n in 0..x.batch() {
            gemm(
                rows,
                self.in_channels,
                vin,
                F::one(),
                &self.weight.value,
                Strides::row_major(rows).transposed(),
                x.sample(n),
                Strides::row_major(vin),
                F::zero(),
                &mut cols,
                Strides::row_major(vin),
            );
            let ys = y.sample_mut(n);
            for co in 0..self.out_channels {
                let b = self.bias.as_ref().map_or(F::zero(), |b| b.value[co]);
                let yc = &mut ys[co * vout..(co + 1) * vout];
                for t in 0..8 {
                    let (kx, ky, kz) = (t & 1, (t >> 1) & 1, t >> 2);
                    let src = &cols[(co * 8 + t) * vin..(co * 8 + t + 1) * vin];
                    for z in 0..nz {
                        for yy in 0..ny {
                            let s0 = (z * ny + yy) * nx;
                            let d0 = ((2 * z + kz) * od[1] + 2 * yy + ky) * od[0] + kx;
                            for xx in 0..nx {
                                yc[d0 + 2 * xx] = src[s0 + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.forward(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self
            .cached_input
            .take()
            .expect("ConvTranspose3d::backward without forward_train");
        let [nx, ny, nz] = x.dims();
        let od = dy.dims();
        let vin = x.voxels();
        let vout = dy.voxels();
        let rows = self.out_channels * 8;
        let mut dx = Tensor::zeros(x.batch(), self.in_channels, x.dims());
        let mut dcols = vec![F::zero(); rows * vin];
        for n in 0..x.batch() {
            let dys = dy.sample(n);
            for co in 0..self.out_channels {
                let dyc = &dys[co * vout..(co + 1) * vout];
                if let Some(b) = &mut self.bias {
                    b.grad[co] += dyc.iter().copied().sum::<F>();
                }
                for t in 0..8 {
                    let (kx, ky, kz) = (t & 1, (t >> 1) & 1, t >> 2);
                    let dst = &mut dcols[(co * 8 + t) * vin..(co * 8 + t + 1) * vin];
                    for z in 0..nz {
                        for yy in 0..ny {
                            let s0 = (z * ny + yy) * nx;
                            let d0 = ((2 * z + kz) * od[1] + 2 * yy + ky) * od[0] + kx;
                            for xx in 0..nx {
                                dst[s0 + xx] = dyc[d0 + 2 * xx];
                            }
                        }
                    }
                }
            }
            // dW[in × rows] += X[in × vin] · dcolsᵀ
            gemm(
                self.in_channels,
                vin,
                rows,
                F::one(),
                x.sample(n),
                Strides::row_major(vin),
                &dcols,
                Strides::row_major(vin).transposed(),
                F::one(),
                &mut self.weight.grad,
                Strides::row_major(rows),
            );
            gemm(
                self.in_channels,
                rows,
                vin,
                F::one(),
                &self.weight.value,
                Strides::row_major(rows),
                &dcols,
                Strides::row_major(vin),
                F::zero(),
                dx.sample_mut(n),
                Strides::row_major(vin),
            );
        }
        dx
    }
}

impl<F: Real> Module<F> for ConvTranspose3d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let od = conv.output_dims(x.dims()).unwrap();
        let k = conv.kernel;
        let mut y = Tensor::zeros(x.batch(), conv.out_channels, od);
        let [nx, ny, nz] = x.dims();
        for n in 0..x.batch() {
            for co in 0..conv.out_channels {
                for oz in 0..od[2] {
                    for oy in 0..od[1] {
                        for ox in 0..od[0] {
                            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]);
                            for ci in 0..conv.in_channels {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * conv.stride + kz) as isize - conv.padding as isize;
                                            let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                            let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= nz as isize || iy >= ny as isize || ix >= nx as isize {
                                                continue;
                                            }
                                            let w = conv.weight.value[(((co * conv.in_channels + ci) * k + kz) * k + ky) * k + kx];
                                            let xv = x.channel(n, ci)[(iz as usize * ny + iy as usize) * nx + ix as usize];
                                            acc += w * xv;
                                        }
                                    }
                                }
                            }
                            y.channel_mut(n, co)[(oz * od[1] + oy) * od[0] + ox] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, dims: [usize; 3]) -> Tensor<f64> {
        let n = b * c * dims.iter().product::<usize>();
        Tensor::from_vec(b, c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, dims) in &[
            (3, 1, 1, [5, 4, 6]),
            (2, 2, 0, [4, 6, 2]),
            (1, 1, 0, [3, 3, 3]),
            (3, 2, 1, [5, 5, 5]),
        ] {
            let mut conv = Conv3d::<f64>::new(2, 3, k, s, p, true, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3];
            let x = random_tensor(&mut rng, 2, 2, dims);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    /// Backward of a linear map is the adjoint: <dy, conv(x)> = <conv^T(dy), x> (bias-free).
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p, dims) in &[(3, 1, 1, [4, 5, 3]), (2, 2, 0, [4, 4, 6]), (1, 1, 0, [2, 3, 4])] {
            let mut conv = Conv3d::<f64>::new(3, 2, k, s, p, false, &mut rng);
            let x = random_tensor(&mut rng, 2, 3, dims);
            let y = conv.forward_train(&x).unwrap();
            let dy = random_tensor(&mut rng, 2, 2, y.dims());
            let dx = conv.backward(&dy);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
            // weight gradient: <dy, conv_w(x)> is linear in w, so grad·w == lhs
            let gw: f64 = conv.weight.grad.iter().zip(&conv.weight.value).map(|(g, w)| g * w).sum();
            assert!((gw - lhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut up = ConvTranspose3d::<f64>::new(3, 2, false, &mut rng);
        let x = random_tensor(&mut rng, 2, 3, [2, 3, 2]);
        let y = up.forward_train(&x).unwrap();
        assert_eq!(y.dims(), [4, 6, 4]);
        let dy = random_tensor(&mut rng, 2, 2, y.dims());
        let dx = up.backward(&dy);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        let gw: f64 = up.weight.grad.iter().zip(&up.weight.value).map(|(g, w)| g * w).sum();
        assert!((gw - lhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn transposed_conv_places_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = ConvTranspose3d::<f64>::new(1, 1, true, &mut rng);
        up.weight.value = (0..8).map(|t| t as f64).collect();
        up.bias.as_mut().unwrap().value = vec![0.5];
        let x = Tensor::from_vec(1, 1, [1, 1, 1], vec![2.0]).unwrap();
        let y = up.forward(&x).unwrap();
        // output index x + 2y + 4z equals tap index kx + 2ky + 4kz
        let expect: Vec<f64> = (0..8).map(|t| 2.0 * t as f64 + 0.5).collect();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv3d::<f32>::new(2, 2, 3, 1, 1, false, &mut rng);
        let x = Tensor::<f32>::zeros(1, 3, [4, 4, 4]);
        assert!(matches!(conv.forward(&x), Err(Error::Shape(_))));
        let down = Conv3d::<f32>::new(1, 1, 2, 2, 0, false, &mut rng);
        assert!(down.forward(&Tensor::zeros(1, 1, [3, 4, 4])).is_err());
    }
}
