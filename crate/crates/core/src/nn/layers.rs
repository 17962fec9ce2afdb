//! Feature-map kernels over channel-major (`C x H x W`) buffers.
//!
//! Convolutions go through im2col and a GEMM; every kernel has a matching
//! adjoint used by the backward pass.

use std::fmt::Debug;

use num_traits::Float;

use crate::search::reflect;

/// Floating-point type the network can run in. Training uses `f32`;
/// gradient checks use `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a * b` for row-major `a: m x k` and `b: k x n`, each given by
    /// (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        assert!(
            (rows - 1) * rs + (cols - 1) * cs < len,
            "gemm operand out of bounds"
        );
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                c: &mut [Self],
            ) {
                check_extent(a.len(), m, k, sa);
                check_extent(b.len(), k, n, sb);
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: operand extents were checked above; c is m x n row-major.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shape of one convolution: `cout x cin x k x k` weights plus `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

fn reflected_offsets(n: usize) -> [Vec<usize>; 3] {
    let make = |d: isize| {
        (0..n)
            .map(|i| reflect(i as isize + d, n))
            .collect::<Vec<_>>()
    };
    [make(-1), make(0), make(1)]
}

/// `(cin * 9) x (h * w)` patch matrix with reflect padding.
pub fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let rows = reflected_offsets(h);
    let cols_idx = reflected_offsets(w);
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let src = &plane[rows[ky][y] * w..][..w];
                    let out = &mut dst[y * w..][..w];
                    for (o, &sx) in out.iter_mut().zip(&cols_idx[kx]) {
                        *o = src[sx];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters patch-matrix gradients back onto the image.
pub fn col2im3<T: Scalar>(dcols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let rows = reflected_offsets(h);
    let cols_idx = reflected_offsets(w);
    let mut dx = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &dcols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let row = &src[y * w..][..w];
                    let dst = rows[ky][y] * w;
                    for (&g, &sx) in row.iter().zip(&cols_idx[kx]) {
                        plane[dst + sx] = plane[dst + sx] + g;
                    }
                }
            }
        }
    }
    dx
}

/// Output `cout x (h*w)` and the patch matrix needed by the backward pass.
/// For 1x1 kernels the patch matrix is the input itself.
pub fn conv_forward<T: Scalar>(
    spec: ConvSpec,
    weight: &[T],
    bias: &[T],
    x: &[T],
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let cols = if spec.kernel == 3 {
        im2col3(x, spec.cin, h, w)
    } else {
        x.to_vec()
    };
    let kk = spec.fan_in();
    let mut out = vec![T::zero(); spec.cout * hw];
    T::gemm(spec.cout, kk, hw, weight, (kk, 1), &cols, (hw, 1), &mut out);
    for (o, &b) in out.chunks_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v = *v + b);
    }
    (out, cols)
}

/// Weight, bias and (optionally) input gradients of a convolution.
pub fn conv_backward<T: Scalar>(
    spec: ConvSpec,
    weight: &[T],
    cols: &[T],
    gout: &[T],
    h: usize,
    w: usize,
    want_input: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let hw = h * w;
    let kk = spec.fan_in();
    let mut dw = vec![T::zero(); spec.weight_len()];
    T::gemm(spec.cout, hw, kk, gout, (hw, 1), cols, (1, hw), &mut dw);
    let db = gout
        .chunks(hw)
        .map(|g| g.iter().fold(T::zero(), |a, &v| a + v))
        .collect();
    let dx = want_input.then(|| {
        let mut dcols = vec![T::zero(); kk * hw];
        T::gemm(
            kk,
            spec.cout,
            hw,
            weight,
            (1, kk),
            gout,
            (hw, 1),
            &mut dcols,
        );
        if spec.kernel == 3 {
            col2im3(&dcols, spec.cin, h, w)
        } else {
            dcols
        }
    });
    (dw, db, dx)
}

/// ReLU, or gating by a frozen activation pattern when `frozen` is given.
pub fn relu_forward<T: Scalar>(z: &mut [T], frozen: Option<&[bool]>) -> Vec<bool> {
    match frozen {
        Some(mask) => {
            for (v, &on) in z.iter_mut().zip(mask) {
                if !on {
                    *v = T::zero();
                }
            }
            mask.to_vec()
        }
        None => z
            .iter_mut()
            .map(|v| {
                let on = *v > T::zero();
                if !on {
                    *v = T::zero();
                }
                on
            })
            .collect(),
    }
}

pub fn relu_backward<T: Scalar>(g: &mut [T], mask: &[bool]) {
    for (v, &on) in g.iter_mut().zip(mask) {
        if !on {
            *v = T::zero();
        }
    }
}

/// 2x2 max pooling on even `h x w`; returns pooled map and the flat source
/// index of each maximum (first maximum in scan order on ties). A frozen
/// argmax table replaces the comparison when given.
pub fn maxpool2_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    frozen: Option<&[u32]>,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let best = match frozen {
                    Some(f) => f[arg.len()] as usize,
                    None => {
                        let base = ci * h * w;
                        let cands = [
                            base + 2 * y * w + 2 * xo,
                            base + 2 * y * w + 2 * xo + 1,
                            base + (2 * y + 1) * w + 2 * xo,
                            base + (2 * y + 1) * w + 2 * xo + 1,
                        ];
                        let mut best = cands[0];
                        for &i in &cands[1..] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        best
                    }
                };
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(g: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&v, &i) in g.iter().zip(arg) {
        dx[i as usize] = dx[i as usize] + v;
    }
    dx
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` map.
pub fn upsample2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            let row = &x[ci * h * w + (y / 2) * w..][..w];
            for xo in 0..ow {
                out.push(row[xo / 2]);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2_forward`]; `h x w` is the low-resolution size.
pub fn upsample2_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let i = ci * h * w + (y / 2) * w + xo / 2;
                dx[i] = dx[i] + g[ci * oh * ow + y * ow + xo];
            }
        }
    }
    dx
}
