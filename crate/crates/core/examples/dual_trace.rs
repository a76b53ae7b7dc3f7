use wdl_core::tensor::Tensor;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let t = Tensor::load(std::path::Path::new(&path)).unwrap();
    // (h, w, r) stack of atoms
    let (h, w, r) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let atom = |j: usize| -> Vec<f64> {
        (0..h * w).map(|p| t.data()[p * r + j]).collect()
    };
    let mut worst = 0.0f64;
    for a in 0..r {
        for b in 0..r {
            if a == b { continue; }
            let (xa, xb) = (atom(a), atom(b));
            let mut best = f64::INFINITY;
            for dy in 0..h {
                for dx in 0..w {
                    let mut l1 = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            let shifted = xb[((y + dy) % h) * w + (x + dx) % w];
                            l1 += (xa[y * w + x] - shifted).abs();
                        }
                    }
                    if l1 < best { best = l1; }
                }
            }
            if best > worst { worst = best; }
            println!("atoms {a}->{b}: min-over-shifts l1 = {best:.4}");
        }
    }
    println!("max over pairs: {worst:.4}");
}
