use std::fmt::Write as _;

use rayon::prelude::*;

use super::encode_sequence;
use crate::data::{Dataset, LabelTable, PackedVideo};
use crate::diffcore::{Graph, NormMode};
use crate::error::{Error, Result};
use crate::metrics::{icc31, mae, PairedSeries};
use crate::model::ModelBundle;

/// Runs the GRU over the whole video and returns the eval-mode regressor
/// output at each requested frame.
pub fn predict_video(model: &ModelBundle, video: &PackedVideo, frames: &[usize]) -> Result<Vec<Vec<f32>>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&f) = frames.iter().find(|&&f| f >= video.num_frames()) {
        return Err(Error::Data(format!(
            "frame {f} requested from video {} with {} frames",
            video.id,
            video.num_frames()
        )));
    }
    let mut g = Graph::inference();
    let bound = model.bind(&mut g);
    let x = g.leaf(video.frames.clone());
    let states = encode_sequence(&mut g, &bound, x)?;
    let picked: Vec<_> = frames.iter().map(|&f| states[f]).collect();
    let h = g.concat_batch(&picked)?;
    let mut stats = model.norm_stats.clone();
    let pred = bound.regress_head(&mut g, h, &mut stats, NormMode::Eval)?;
    let n = model.config.num_outputs;
    Ok(g.value(pred).data().chunks_exact(n).map(|r| r.to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimMetrics {
    pub icc: f64,
    pub degenerate: bool,
    pub mae: f64,
}

/// Per-dimension agreement over all labeled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dims: Vec<DimMetrics>,
    pub frames: usize,
}

impl EvalReport {
    pub fn mean_icc(&self) -> f64 {
        self.dims.iter().map(|d| d.icc).sum::<f64>() / self.dims.len() as f64
    }

    pub fn mean_mae(&self) -> f64 {
        self.dims.iter().map(|d| d.mae).sum::<f64>() / self.dims.len() as f64
    }

    /// Aligned, tab-separated table: one row per dimension in ascending
    /// order, then an `avg` row.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6}\t{:>16}\t{:>16}\n", "dim", "icc", "mae");
        for (n, d) in self.dims.iter().enumerate() {
            write!(s, "{:<6}\t{:>16.12}\t{:>16.12}", format!("au_{n}"), d.icc, d.mae).unwrap();
            if d.degenerate {
                s.push_str("\tdegenerate");
            }
            s.push('\n');
        }
        writeln!(s, "{:<6}\t{:>16.12}\t{:>16.12}", "avg", self.mean_icc(), self.mean_mae()).unwrap();
        s
    }
}

/// Scores `model` on exactly the labeled frames of `data`.
pub fn evaluate(model: &ModelBundle, data: &Dataset, labels: &LabelTable) -> Result<EvalReport> {
    let labels = labels.restrict_to(data);
    if labels.is_empty() {
        return Err(Error::Data("evaluation label set is empty".into()));
    }
    if labels.num_outputs != model.config.num_outputs {
        return Err(Error::Config(format!(
            "labels have {} intensities, the network regresses {}",
            labels.num_outputs, model.config.num_outputs
        )));
    }
    labels.check_against(data)?;
    // Rows grouped per video, keeping table order inside each group.
    let groups: Vec<(usize, Vec<usize>)> = data
        .videos
        .iter()
        .enumerate()
        .map(|(v, video)| {
            let rows = labels
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.video == video.id)
                .map(|(i, _)| i)
                .collect();
            (v, rows)
        })
        .filter(|(_, rows): &(usize, Vec<usize>)| !rows.is_empty())
        .collect();
    let preds: Vec<Vec<Vec<f32>>> = groups
        .par_iter()
        .map(|(v, rows)| {
            let frames: Vec<usize> = rows.iter().map(|&i| labels.rows[i].frame).collect();
            predict_video(model, &data.videos[*v], &frames)
        })
        .collect::<Result<_>>()?;
    let n = labels.num_outputs;
    let mut truth = vec![Vec::new(); n];
    let mut guess = vec![Vec::new(); n];
    for ((_, rows), p) in groups.iter().zip(&preds) {
        for (&i, row) in rows.iter().zip(p) {
            for d in 0..n {
                truth[d].push(labels.rows[i].values[d] as f64);
                guess[d].push(row[d] as f64);
            }
        }
    }
    let dims = (0..n)
        .map(|d| {
            let series = PairedSeries::new(&truth[d], &guess[d])?;
            let icc = icc31(series)?;
            Ok(DimMetrics {
                icc: icc.value,
                degenerate: icc.degenerate,
                mae: mae(series)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        dims,
        frames: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn table_layout() {
        let r = EvalReport {
            dims: vec![
                DimMetrics {
                    icc: 1.0,
                    degenerate: false,
                    mae: 0.0,
                },
                DimMetrics {
                    icc: 0.5,
                    degenerate: false,
                    mae: 0.25,
                },
            ],
            frames: 4,
        };
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("au_0"));
        assert!(lines[3].starts_with("avg"));
        let avg: Vec<f64> = lines[3].split('\t').skip(1).map(|v| v.trim().parse().unwrap()).collect();
        assert_eq!(avg, vec![0.75, 0.125]);
    }

    #[test]
    fn predictions_are_causal_prefixes() {
        let model = ModelBundle::init(Default::default(), 4).unwrap();
        let v = PackedVideo::new("a", Tensor::from_fn(vec![6, 1, 16, 16], |i| (i % 17) as f32 / 17.0)).unwrap();
        let all = predict_video(&model, &v, &[0, 2, 5]).unwrap();
        let short = PackedVideo::new("a", v.frames.index_range(0, 3)).unwrap();
        let prefix = predict_video(&model, &short, &[2]).unwrap();
        assert_eq!(all[1], prefix[0]);
        assert!(predict_video(&model, &v, &[6]).is_err());
    }
}
