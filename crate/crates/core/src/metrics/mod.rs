//! Caption reward (CIDEr-D) and detection metrics (AUROC, accuracy).

mod auroc;
pub mod cider;
mod predictions;

pub use auroc::{accuracy, auroc, Scored};
pub use cider::{cider, cider_d, corpus_cider, CiderVariant, IdfTable};
pub use predictions::{evaluate, read_predictions, write_predictions, EvalReport, Prediction};
