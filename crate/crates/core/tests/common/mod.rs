//! Brute-force references shared by the oracle tests and the acceptance run.
#![allow(dead_code)]

use acol::grid::BoolGrid;
use acol::localization::BBox;
use acol::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Labels every component with a recursive depth-first search and returns
/// the label grid plus the size of each label.
pub fn label_components(mask: &BoolGrid, eight: bool) -> (Vec<Option<usize>>, Vec<usize>) {
    fn visit(mask: &BoolGrid, eight: bool, r: i64, c: i64, id: usize, labels: &mut [Option<usize>], size: &mut usize) {
        let (h, w) = (mask.height as i64, mask.width as i64);
        if r < 0 || c < 0 || r >= h || c >= w {
            return;
        }
        let idx = (r * w + c) as usize;
        if !mask.cells[idx] || labels[idx].is_some() {
            return;
        }
        labels[idx] = Some(id);
        *size += 1;
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let diagonal = dr != 0 && dc != 0;
                if (dr, dc) != (0, 0) && (eight || !diagonal) {
                    visit(mask, eight, r + dr, c + dc, id, labels, size);
                }
            }
        }
    }
    let mut labels = vec![None; mask.cells.len()];
    let mut sizes = Vec::new();
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) && labels[r * mask.width + c].is_none() {
                let mut size = 0;
                visit(mask, eight, r as i64, c as i64, sizes.len(), &mut labels, &mut size);
                sizes.push(size);
            }
        }
    }
    (labels, sizes)
}

/// Largest component by flood fill; ties go to the label discovered first.
pub fn oracle_largest(mask: &BoolGrid, eight: bool) -> Vec<(usize, usize)> {
    let (labels, sizes) = label_components(mask, eight);
    let Some(best) = (0..sizes.len()).fold(None, |acc: Option<usize>, i| match acc {
        Some(b) if sizes[b] >= sizes[i] => Some(b),
        _ => Some(i),
    }) else {
        return Vec::new();
    };
    let mut out: Vec<(usize, usize)> = (0..labels.len())
        .filter(|&i| labels[i] == Some(best))
        .map(|i| (i / mask.width, i % mask.width))
        .collect();
    out.sort_unstable();
    out
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.random_range(0..30);
    let y0 = rng.random_range(0..30);
    BBox::new(x0, y0, rng.random_range(x0 + 1..=32), rng.random_range(y0 + 1..=32)).unwrap()
}

/// IoU by counting pixels on a 32 x 32 canvas.
pub fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..32 {
        for x in 0..32 {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Zero-pads the input explicitly, then sums bias first and taps in
/// channel, row, column order.
pub fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = vec![0.0; n * ci * ph * pw];
    for b in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    padded[((b * ci + c) * ph + y + pad) * pw + xx + pad] = x.get(&[b, c, y, xx]);
                }
            }
        }
    }
    let (oh, ow) = ((ph - k) / stride + 1, (pw - k) / stride + 1);
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.get(&[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let v = padded[((b * ci + c) * ph + y * stride + ky) * pw + xx * stride + kx];
                                // Padding taps contribute nothing; skipping them keeps the sum identical.
                                if y * stride + ky >= pad && xx * stride + kx >= pad && y * stride + ky < h + pad && xx * stride + kx < wd + pad {
                                    acc += w.get(&[o, c, ky, kx]) * v;
                                }
                            }
                        }
                    }
                    out.set(&[b, o, y, xx], acc);
                }
            }
        }
    }
    out
}

