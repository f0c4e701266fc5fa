//! Procrustes error, PCK, mask IoU and the Wilcoxon signed-rank test.

use quadfit::metrics::{iou_masks, p_mpjpe, pck, procrustes_align, wilcoxon_signed_rank};
use quadfit::render::Mask;

fn main() -> quadfit::Result<()> {
    let gt = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
    // Rotated 90 degrees about z, scaled by 2 and shifted.
    let moved: Vec<[f64; 3]> = gt.iter().map(|p| [-2.0 * p[1] + 5.0, 2.0 * p[0], 2.0 * p[2] - 1.0]).collect();
    let fit = procrustes_align(&moved, &gt, true)?;
    println!("scale mapping the copy back onto the original: {:.6}", fit.scale);
    println!("P-MPJPE of a similarity copy: {:.2e}", p_mpjpe(&[moved], &[gt], true)?.mean);

    let pred = vec![vec![[0.0, 0.0], [10.0, 0.0], [0.0, 30.0]]];
    let truth = vec![vec![[1.0, 1.0], [10.0, 0.0], [0.0, 0.0]]];
    println!("PCK@0.1 with normalizer 100: {:.3}", pck(&pred, &truth, &[vec![1.0; 3]], 0.1, &[100.0], 0.5)?);

    let a = Mask::from_values(3, 1, vec![1.0, 1.0, 0.0])?;
    let b = Mask::from_values(3, 1, vec![0.0, 1.0, 1.0])?;
    println!("IoU of overlapping strips: {:.4}", iou_masks(&a, &b, 0.5)?);

    let before = [3.1, 2.9, 4.2, 3.8, 5.0, 2.2, 3.3, 4.1];
    let after = [2.8, 2.5, 3.9, 3.9, 4.1, 1.9, 3.0, 3.5];
    println!("{:?}", wilcoxon_signed_rank(&after, &before)?);
    Ok(())
}
