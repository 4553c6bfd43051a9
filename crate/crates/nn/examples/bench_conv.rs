use digest_nn::kernels::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use digest_nn::kernels::Scratch;
use std::time::Instant;

fn main() {
    for &(ci, co, n) in &[(8, 8, 32), (16, 8, 32), (16, 16, 16), (32, 32, 8), (64, 64, 4)] {
        let g = ConvGeom {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            dims: [n, n, n],
        };
        let s = g.spatial();
        let x: Vec<f32> = (0..ci * s).map(|i| (i as f32 * 0.1).sin()).collect();
        let w: Vec<f32> = (0..ci * co * 27).map(|i| (i as f32 * 0.3).cos()).collect();
        let dy: Vec<f32> = (0..co * s).map(|i| (i as f32 * 0.7).sin()).collect();
        let mut y = vec![0.0; co * s];
        let mut sc = Scratch::default();
        let macs = (ci * co * 27 * s) as f64;
        let t = Instant::now();
        conv3d_forward(&x, &w, None, &g, &mut y, &mut sc);
        let f = t.elapsed();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let t = Instant::now();
        conv3d_backward(&x, &w, &dy, &g, Some(&mut dx), None, None, &mut sc);
        let bx = t.elapsed();
        let t = Instant::now();
        conv3d_backward(&x, &w, &dy, &g, None, Some(&mut dw), None, &mut sc);
        let bw = t.elapsed();
        println!(
            "{ci}->{co} @{n}: fwd {:?} ({:.1} GMAC/s) dx {:?} ({:.1}) dw {:?} ({:.1})",
            f,
            macs / f.as_secs_f64() / 1e9,
            bx,
            macs / bx.as_secs_f64() / 1e9,
            bw,
            macs / bw.as_secs_f64() / 1e9
        );
    }
}
