use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// `y = W x + b` on each flattened sample. `weight` is `(out, in, 1, 1)`;
/// the output is `(n, out, 1, 1)`.
pub fn linear_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let fan_in = s.sample_len();
    if ws.c != fan_in || ws.h != 1 || ws.w != 1 {
        return Err(Error::dim(
            "linear",
            format!("input {s} flattens to {fan_in}, weight is {ws}"),
        ));
    }
    let out_dim = ws.n;
    if let Some(b) = bias {
        if b.len() != out_dim {
            return Err(Error::dim("linear", format!("bias {} vs {out_dim} outputs", b.len())));
        }
    }
    let w = weight.data();
    let mut out = Tensor::zeros(Shape::new(s.n, out_dim, 1, 1));
    for n in 0..s.n {
        let x = input.sample(n);
        for o in 0..out_dim {
            let dot: T = w[o * fan_in..(o + 1) * fan_in]
                .iter()
                .zip(x)
                .map(|(&a, &b)| a * b)
                .sum();
            let b = bias.map_or(T::zero(), |b| b.data()[o]);
            out.data_mut()[n * out_dim + o] = dot + b;
        }
    }
    Ok(out)
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<LinearGrads<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let (fan_in, out_dim) = (ws.c, ws.n);
    if grad_out.shape() != Shape::new(s.n, out_dim, 1, 1) {
        return Err(Error::dim(
            "linear backward",
            format!("grad {} for {out_dim} outputs", grad_out.shape()),
        ));
    }
    let w = weight.data();
    let g = grad_out.data();
    let input_grad = need_input.then(|| {
        let mut gin = Tensor::zeros(s);
        for n in 0..s.n {
            let dst = &mut gin.data_mut()[n * fan_in..(n + 1) * fan_in];
            for o in 0..out_dim {
                let gv = g[n * out_dim + o];
                for (d, &wv) in dst.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *d = *d + gv * wv;
                }
            }
        }
        gin
    });
    let (weight_grad, bias_grad) = if need_params {
        let mut gw = vec![T::zero(); ws.len()];
        let mut gb = vec![T::zero(); out_dim];
        for n in 0..s.n {
            let x = input.sample(n);
            for o in 0..out_dim {
                let gv = g[n * out_dim + o];
                gb[o] = gb[o] + gv;
                for (d, &xv) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                    *d = *d + gv * xv;
                }
            }
        }
        (
            Some(Tensor::from_vec(ws, gw).unwrap()),
            has_bias.then(|| Tensor::vector(gb)),
        )
    } else {
        (None, None)
    };
    Ok(LinearGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}
