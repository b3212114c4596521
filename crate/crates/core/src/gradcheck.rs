//! Reverse-mode gradients vs. central finite differences.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences at `point`, returning the maximum over
/// coordinates of |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
///
/// `f` must be deterministic: any internal noise has to come from fixed
/// seeds so the perturbed evaluations see identical draws.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    if step <= 0.0 {
        return Err(Error::invalid(format!("step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::invalid(format!(
            "gradient_check needs a scalar function, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("function value at the check point".into()));
    }
    let mut grads = g.backward(loss)?;
    let g_ad = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    // The point stays grad-requiring in the perturbed evaluations: functions
    // that build internal gradient nodes must see the same graph either way.
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(p.clone());
        let loss = f(&mut g, x)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("perturbed function value".into()));
        }
        Ok(v)
    };

    let mut max_err: f64 = 0.0;
    let mut perturbed = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        perturbed.data_mut()[i] = orig + step;
        let up = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig - step;
        let down = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let ad = g_ad.data()[i];
        let err = (ad - fd).abs() / (1e-12f64).max(ad.abs() + fd.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Gradient-check every primitive kind at seeded random points (step 1e-6)
/// and return (name, max relative error) per kind. Scalarizing wrappers keep
/// each check focused on one primitive; points for the straight-through
/// clamp stay strictly inside (0,1) where it matches the true derivative.
pub fn primitive_battery() -> Result<Vec<(&'static str, f64)>> {
    use crate::rng::Rng;
    let step = 1e-6;
    let random = |shape: &[usize], seed: u64, scale: f64| {
        let mut t = Tensor::zeros(shape);
        let mut rng = Rng::new(seed);
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
        t
    };
    let x8 = random(&[1, 8, 8], 10, 0.8);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    macro_rules! check {
        ($name:expr, $point:expr, $f:expr) => {
            out.push(($name, gradient_check($f, &$point, step)?));
        };
    }

    check!("add", x8, |g, x| {
        let c = g.constant(random(&[1, 8, 8], 11, 0.5));
        let y = g.add(x, c)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("sub", x8, |g, x| {
        let c = g.constant(random(&[1, 8, 8], 12, 0.5));
        let y = g.sub(c, x)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("mul", x8, |g, x| {
        let c = g.constant(random(&[1, 8, 8], 13, 0.5));
        let y = g.mul(x, c)?;
        Ok(g.sum(y))
    });
    check!("scale", x8, |g, x| {
        let y = g.scale(x, -2.5);
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("mul-scalar", Tensor::scalar(0.6), |g, x| {
        let t = g.constant(random(&[2, 3], 14, 1.0));
        let y = g.mul_scalar(t, x)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("abs", x8, |g, x| {
        let y = g.abs(x);
        Ok(g.mean(y))
    });
    check!("relu", x8, |g, x| {
        let y = g.relu(x);
        Ok(g.mean(y))
    });
    check!("leaky-relu", x8, |g, x| {
        let y = g.leaky_relu(x, 0.2);
        Ok(g.mean(y))
    });
    check!("sigmoid", x8, |g, x| {
        let y = g.sigmoid(x);
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("tanh", x8, |g, x| {
        let y = g.tanh(x);
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("clamp01-ste", random(&[1, 4, 4], 41, 1.0).map(|v| 0.5 + 0.35 * v.tanh()), |g, x| {
        let y = g.clamp01_ste(x);
        Ok(g.sum(y))
    });
    check!("sum", x8, |g, x| Ok(g.sum(x)));
    check!("mean", x8, |g, x| Ok(g.mean(x)));
    check!("sum-spatial", random(&[3, 4, 4], 15, 0.7), |g, x| {
        let s = g.sum_spatial(x)?;
        let sq = g.mul(s, s)?;
        Ok(g.mean(sq))
    });
    check!("broadcast-spatial", random(&[3], 17, 1.0), |g, x| {
        let b = g.broadcast_spatial(x, 5, 5)?;
        let c = g.constant(random(&[3, 5, 5], 16, 0.5));
        let y = g.mul(b, c)?;
        Ok(g.sum(y))
    });
    check!("matmul", random(&[4, 3], 19, 0.8), |g, x| {
        let b = g.constant(random(&[3, 2], 18, 0.8));
        let y = g.matmul(x, b)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("transpose", random(&[4, 3], 23, 0.8), |g, x| {
        let t = g.transpose(x)?;
        let c = g.constant(random(&[3, 4], 22, 0.5));
        let y = g.mul(t, c)?;
        Ok(g.sum(y))
    });
    check!("reshape", random(&[4, 4], 24, 0.8), |g, x| {
        let r = g.reshape(x, &[2, 8])?;
        let sq = g.mul(r, r)?;
        Ok(g.mean(sq))
    });
    check!("concat", random(&[1, 4, 4], 26, 0.8), |g, x| {
        let c = g.constant(random(&[2, 4, 4], 25, 0.5));
        let y = g.concat(0, &[x, c])?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("narrow", random(&[2, 4, 4], 27, 0.8), |g, x| {
        let y = g.narrow(x, 1, 1, 2)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("conv2d", x8, |g, x| {
        let k = g.constant(random(&[2, 1, 3, 3], 28, 0.6));
        let b = g.constant(random(&[2], 29, 0.3));
        let y = g.conv2d(x, k, Some(b), 1)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("conv2d-dilated", x8, |g, x| {
        let k = g.constant(random(&[2, 1, 3, 3], 28, 0.6));
        let y = g.conv2d(x, k, None, 2)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("conv2d-kernel", random(&[2, 1, 3, 3], 31, 0.6), |g, x| {
        let img = g.constant(random(&[1, 8, 8], 30, 0.7));
        let y = g.conv2d(img, x, None, 1)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("conv-input-vjp", random(&[1, 6, 6], 36, 0.7), |g, x| {
        let k = g.constant(random(&[1, 2, 3, 3], 35, 0.6));
        let y = g.conv_input_vjp(x, k, 1)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("conv-kernel-vjp", random(&[1, 6, 6], 38, 0.7), |g, x| {
        let u = g.constant(random(&[2, 6, 6], 37, 0.6));
        let y = g.conv_kernel_vjp(x, u, 1)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("upsample2x", random(&[1, 4, 4], 40, 0.8), |g, x| {
        let y = g.upsample2x(x)?;
        let c = g.constant(random(&[1, 8, 8], 39, 0.5));
        let z = g.mul(y, c)?;
        Ok(g.sum(z))
    });
    check!("sumpool2x", x8, |g, x| {
        let y = g.sumpool2x(x)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("residual5x5", x8, |g, x| {
        let y = g.residual5x5(x)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    });
    check!("bce-with-logits", x8, |g, x| {
        let t = g.constant(random(&[1, 8, 8], 42, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        g.bce_with_logits(x, t)
    });
    check!("bce-with-logits-targets", random(&[2, 3], 44, 0.2).map(|v| v + 0.5), |g, x| {
        let logits = g.constant(random(&[2, 3], 43, 1.0));
        g.bce_with_logits(logits, x)
    });
    check!("mse", x8, |g, x| {
        let b = g.constant(random(&[1, 8, 8], 45, 0.7));
        g.mse(x, b)
    });
    Ok(out)
}
