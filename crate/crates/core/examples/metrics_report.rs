//! Confusion matrix, derived scores and the ROC curve for a set of tile
//! predictions.
//!
//! cargo run --example metrics_report

use tileforge::metrics::{confusion, roc_auc, roc_csv, scores, ConfusionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let labels = [true, true, true, true, false, false, false, false, true, false];
    let probs = [0.92, 0.81, 0.55, 0.40, 0.62, 0.30, 0.12, 0.05, 0.71, 0.40];
    let cm = confusion(&labels, &probs, 0.5)?;
    println!("{cm:?}");
    let s = scores(&cm);
    println!(
        "accuracy {:?} precision {:?} recall {:?} f1 {:?}",
        s.accuracy, s.precision, s.recall, s.f1
    );
    let roc = roc_auc(&labels, &probs)?;
    println!("AUROC {:.4}\n{}", roc.auc, roc_csv(&roc));

    // undefined scores stay undefined instead of turning into zeros
    let empty_positive = scores(&ConfusionMatrix::new(10, 0, 0, 0));
    println!("no predicted positives: precision {:?}", empty_positive.precision);
    Ok(())
}
