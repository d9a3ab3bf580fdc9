use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub fn relu6<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::of_f64(6.0);
    input.map(|x| x.max(T::zero()).min(six))
}

/// Subgradient 0 at exactly 0 and exactly 6.
pub fn relu6_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let six = T::of_f64(6.0);
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if !(x > T::zero() && x < six) {
            *d = T::zero();
        }
    }
    g
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("add", format!("{} vs {}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn global_avgpool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim("global_avgpool", format!("empty spatial dims in {s}")));
    }
    let plane = s.plane();
    let denom = T::of_usize(plane);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for (k, d) in out.data_mut().iter_mut().enumerate() {
        let sum: T = input.data()[k * plane..(k + 1) * plane].iter().copied().sum();
        *d = sum / denom;
    }
    Ok(out)
}

pub fn global_avgpool_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape.plane();
    let denom = T::of_usize(plane);
    let mut g = Tensor::zeros(input_shape);
    for (k, &gv) in grad_out.data().iter().enumerate() {
        g.data_mut()[k * plane..(k + 1) * plane].fill(gv / denom);
    }
    g
}

/// Channel concatenation with `a`'s channels first.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::dim("concat_channels", format!("{sa} vs {sb}")));
    }
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(shape, data)
}

/// Splits a concat gradient back into the two operands' gradients.
pub fn concat_channels_backward<T: Element>(
    a_channels: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let plane = s.plane();
    let sa = Shape::new(s.n, a_channels, s.h, s.w);
    let sb = Shape::new(s.n, s.c - a_channels, s.h, s.w);
    let mut da = Vec::with_capacity(sa.len());
    let mut db = Vec::with_capacity(sb.len());
    for n in 0..s.n {
        let g = grad_out.sample(n);
        da.extend_from_slice(&g[..a_channels * plane]);
        db.extend_from_slice(&g[a_channels * plane..]);
    }
    (
        Tensor::from_vec(sa, da).unwrap(),
        Tensor::from_vec(sb, db).unwrap(),
    )
}
