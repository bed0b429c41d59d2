//! Per-iteration metrics as CSV.

pub const CSV_HEADER: &str = "epoch,iter,lr,loss,eval_acc,imgs_per_sec";

/// One row: a training iteration fills lr, loss, and throughput; an
/// evaluation fills eval_acc. Absent fields render empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub iter: u64,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub imgs_per_sec: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.iter,
            cell(r.lr),
            cell(r.loss),
            cell(r.eval_acc),
            cell(r.imgs_per_sec)
        ));
    }
    out
}
