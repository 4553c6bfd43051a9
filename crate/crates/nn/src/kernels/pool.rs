/// 2×2×2 max pooling with stride 2 over `channels × dims`; records the
/// winning input offset of every output voxel.
pub fn max_pool2_forward(x: &[f32], channels: usize, dims: [usize; 3], out: &mut [f32], argmax: &mut [u32]) {
    let [dn, hn, wn] = dims;
    let (od, oh, ow) = (dn / 2, hn / 2, wn / 2);
    let s = dn * hn * wn;
    let so = od * oh * ow;
    for c in 0..channels {
        for d in 0..od {
            for h in 0..oh {
                for w in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0usize;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let i = c * s + ((2 * d + a) * hn + 2 * h + b) * wn + 2 * w + e;
                                if x[i] > best || (a + b + e == 0) {
                                    best = x[i];
                                    arg = i;
                                }
                            }
                        }
                    }
                    let o = c * so + (d * oh + h) * ow + w;
                    out[o] = best;
                    argmax[o] = arg as u32;
                }
            }
        }
    }
}

pub fn max_pool2_backward(dy: &[f32], argmax: &[u32], dx: &mut [f32]) {
    for (g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += g;
    }
}
