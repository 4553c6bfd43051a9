pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Group normalization of one sample laid out `channels × spatial`.
/// Writes per-group mean and reciprocal std into `stats` (`2 × groups`).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward(
    x: &[f32],
    channels: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    mean: &mut [f32],
    rstd: &mut [f32],
) {
    let s = x.len() / channels;
    let per = channels / groups;
    for g in 0..groups {
        let span = &x[g * per * s..(g + 1) * per * s];
        let n = span.len() as f64;
        let mu = span.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = span.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + GROUP_NORM_EPS as f64).sqrt();
        mean[g] = mu as f32;
        rstd[g] = r as f32;
        for c in g * per..(g + 1) * per {
            let (ga, be) = (gamma[c], beta[c]);
            let (mu, r) = (mu as f32, r as f32);
            for (o, v) in out[c * s..(c + 1) * s].iter_mut().zip(&x[c * s..(c + 1) * s]) {
                *o = (v - mu) * r * ga + be;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f32],
    dy: &[f32],
    channels: usize,
    groups: usize,
    gamma: &[f32],
    mean: &[f32],
    rstd: &[f32],
    dx: Option<&mut [f32]>,
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
) {
    let s = x.len() / channels;
    let per = channels / groups;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = dx;
    for g in 0..groups {
        let (mu, r) = (mean[g], rstd[g]);
        // Σ dxhat and Σ dxhat·xhat over the group.
        let mut sum_dxh = 0.0f64;
        let mut sum_dxh_xh = 0.0f64;
        for c in g * per..(g + 1) * per {
            let mut sdy = 0.0f64;
            let mut sdy_xh = 0.0f64;
            for (gy, v) in dy[c * s..(c + 1) * s].iter().zip(&x[c * s..(c + 1) * s]) {
                let xh = (v - mu) * r;
                sdy += *gy as f64;
                sdy_xh += (*gy * xh) as f64;
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[c] += sdy_xh as f32;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[c] += sdy as f32;
            }
            sum_dxh += sdy * gamma[c] as f64;
            sum_dxh_xh += sdy_xh * gamma[c] as f64;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let n = (per * s) as f64;
            let m1 = (sum_dxh / n) as f32;
            let m2 = (sum_dxh_xh / n) as f32;
            for c in g * per..(g + 1) * per {
                let ga = gamma[c];
                for ((o, gy), v) in dx[c * s..(c + 1) * s]
                    .iter_mut()
                    .zip(&dy[c * s..(c + 1) * s])
                    .zip(&x[c * s..(c + 1) * s])
                {
                    let xh = (v - mu) * r;
                    *o += r * (gy * ga - m1 - xh * m2);
                }
            }
        }
    }
}
