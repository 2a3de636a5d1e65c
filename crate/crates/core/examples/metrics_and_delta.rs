//! Evaluation metrics and the relative multi-task gain over single-task
//! baselines.

use mtpsl::metrics::{delta_mtl, mean_angle_err, ConfusionMatrix};

fn main() -> mtpsl::Result<()> {
    let labels = [0u16, 0, 1, 1, 2, 2, 255];
    let pred = [0u16, 1, 1, 1, 2, 0, 2];
    let mut cm = ConfusionMatrix::new(3);
    cm.add_classes(&pred, &labels, 255)?;
    println!("per-class IoU {:?}", cm.iou_per_class());
    println!("mIoU {:.4}", cm.miou()?);

    // Two pixels in 3×HW layout: one exact, one perpendicular.
    let pred_n = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let label_n = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
    println!("mean angle error {:.1} degrees", mean_angle_err(&pred_n, &label_n)?);

    let rows = [
        ("segmentation + depth", vec![74.90, 0.0161], vec![70.26, 0.0141], vec![true, false]),
        ("seg + depth + normals", vec![36.95, 0.5510, 29.51], vec![37.45, 0.6079, 25.94], vec![true, false, false]),
    ];
    for (name, mtl, stl, hib) in rows {
        println!("{name:<22} delta {:+.2}%", delta_mtl(&mtl, &stl, &hib)?);
    }
    Ok(())
}
