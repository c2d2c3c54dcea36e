use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};

pub const MAX_INTENSITY: f32 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub video: String,
    pub frame: usize,
    pub values: Vec<f32>,
}

/// Sparse `(video, frame) → N intensities` table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub num_outputs: usize,
    pub rows: Vec<LabelRow>,
}

impl LabelTable {
    /// Checks row width, value range and `(video, frame)` uniqueness.
    pub fn new(num_outputs: usize, rows: Vec<LabelRow>) -> Result<Self> {
        if num_outputs == 0 {
            return Err(Error::Data("label table needs at least one intensity column".into()));
        }
        let mut seen = HashSet::new();
        for r in &rows {
            if r.values.len() != num_outputs {
                return Err(Error::Data(format!(
                    "label for video {} frame {} has {} values, expected {num_outputs}",
                    r.video,
                    r.frame,
                    r.values.len()
                )));
            }
            if let Some(v) = r.values.iter().find(|v| !(0.0..=MAX_INTENSITY).contains(*v)) {
                return Err(Error::Data(format!(
                    "label for video {} frame {}: intensity {v} outside [0,5]",
                    r.video, r.frame
                )));
            }
            if !seen.insert((r.video.as_str(), r.frame)) {
                return Err(Error::Data(format!(
                    "duplicate label for video {} frame {}",
                    r.video, r.frame
                )));
            }
        }
        Ok(LabelTable { num_outputs, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Errors naming the first row whose video or frame is missing.
    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        for r in &self.rows {
            match data.find(&r.video) {
                None => {
                    return Err(Error::Data(format!(
                        "label references missing video {} (frame {})",
                        r.video, r.frame
                    )))
                }
                Some((_, v)) if r.frame >= v.num_frames() => {
                    return Err(Error::Data(format!(
                        "label references missing frame {} of video {} ({} frames)",
                        r.frame,
                        r.video,
                        v.num_frames()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Rows whose video is in `data`, in their original order.
    pub fn restrict_to(&self, data: &Dataset) -> LabelTable {
        LabelTable {
            num_outputs: self.num_outputs,
            rows: self
                .rows
                .iter()
                .filter(|r| data.find(&r.video).is_some())
                .cloned()
                .collect(),
        }
    }

    /// Draws a `fraction` of the frames of `data` with
    /// [`select_labeled_frames`] and copies their rows from this table,
    /// which must cover every frame drawn.
    pub fn subsample<R: Rng + ?Sized>(&self, data: &Dataset, fraction: f64, rng: &mut R) -> Result<LabelTable> {
        let index: HashMap<(&str, usize), &LabelRow> =
            self.rows.iter().map(|r| ((r.video.as_str(), r.frame), r)).collect();
        let lens: Vec<usize> = data.videos.iter().map(|v| v.num_frames()).collect();
        let rows = select_labeled_frames(&lens, fraction, rng)?
            .into_iter()
            .map(|(v, f)| {
                let id = data.videos[v].id.as_str();
                index.get(&(id, f)).map(|r| (*r).clone()).ok_or_else(|| {
                    Error::Data(format!("dense labels lack video {id} frame {f}"))
                })
            })
            .collect::<Result<_>>()?;
        LabelTable::new(self.num_outputs, rows)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["video_id".to_string(), "frame_index".to_string()];
        header.extend((0..self.num_outputs).map(|i| format!("au_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.video.clone(), r.frame.to_string()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "video_id" || &header[1] != "frame_index" {
            return Err(Error::Data(
                "label header must be `video_id,frame_index,au_0,...`".into(),
            ));
        }
        for (i, h) in header.iter().skip(2).enumerate() {
            if h != format!("au_{i}") {
                return Err(Error::Data(format!("label column {} is {h:?}, expected au_{i}", i + 2)));
            }
        }
        let n = header.len() - 2;
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Data(format!("label row {}: bad {what}", line + 1));
            let frame = rec[1].trim().parse().map_err(|_| bad("frame_index"))?;
            let values = rec
                .iter()
                .skip(2)
                .map(|v| v.trim().parse::<f32>().map_err(|_| bad("intensity")))
                .collect::<Result<Vec<_>>>()?;
            rows.push(LabelRow {
                video: rec[0].to_string(),
                frame,
                values,
            });
        }
        LabelTable::new(n, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Data(d) => Error::Data(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("label csv: {e}"))
}

/// Samples `round(fraction · total)` frames uniformly without replacement
/// from the pooled frames of all videos. Returns sorted `(video, frame)`
/// index pairs.
pub fn select_labeled_frames<R: Rng + ?Sized>(
    video_lengths: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must be in (0,1], got {fraction}")));
    }
    let total: usize = video_lengths.iter().sum();
    let count = (fraction * total as f64).round() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "label fraction {fraction} of {total} frames selects nothing"
        )));
    }
    let mut flat = rand::seq::index::sample(rng, total, count).into_vec();
    flat.sort_unstable();
    let mut out = Vec::with_capacity(count);
    let (mut video, mut offset) = (0, 0);
    for idx in flat {
        while idx >= offset + video_lengths[video] {
            offset += video_lengths[video];
            video += 1;
        }
        out.push((video, idx - offset));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> LabelTable {
        LabelTable::new(
            2,
            vec![
                LabelRow {
                    video: "a".into(),
                    frame: 3,
                    values: vec![0.1, 4.999_999],
                },
                LabelRow {
                    video: "b".into(),
                    frame: 0,
                    values: vec![5.0, 0.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let t = table();
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("video_id,frame_index,au_0,au_1\n"));
        assert_eq!(LabelTable::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut rows = table().rows;
        rows.push(rows[0].clone());
        assert!(LabelTable::new(2, rows).unwrap_err().to_string().contains("duplicate"));
        let bad = LabelRow {
            video: "c".into(),
            frame: 0,
            values: vec![5.5, 0.0],
        };
        assert!(LabelTable::new(2, vec![bad]).is_err());
        assert!(LabelTable::from_csv("video,frame,x\n").is_err());
    }

    #[test]
    fn selection_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lens = [200usize; 20];
        assert_eq!(select_labeled_frames(&lens, 0.02, &mut rng).unwrap().len(), 80);
        let all = select_labeled_frames(&lens, 1.0, &mut rng).unwrap();
        assert_eq!(all.len(), 4000);
        assert_eq!(all[0], (0, 0));
        assert_eq!(all[3999], (19, 199));
        assert!(select_labeled_frames(&lens, 0.0001, &mut rng).is_err());
        assert!(select_labeled_frames(&lens, 1.5, &mut rng).is_err());
    }

    #[test]
    fn selection_of_large_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lens = vec![58_140usize];
        let picks = select_labeled_frames(&lens, 0.02, &mut rng).unwrap();
        assert_eq!(picks.len(), 1163);
    }

    #[test]
    fn subsample_copies_dense_rows() {
        use crate::data::PackedVideo;
        use crate::diffcore::Tensor;
        let v = |id: &str, n| PackedVideo::new(id, Tensor::zeros(vec![n, 1, 2, 2])).unwrap();
        let data = Dataset { videos: vec![v("a", 10), v("b", 30)] };
        let dense = LabelTable::new(
            1,
            ["a", "b", "c"]
                .iter()
                .flat_map(|id| (0..30).map(move |f| LabelRow { video: id.to_string(), frame: f, values: vec![f as f32 / 10.0] }))
                .collect(),
        )
        .unwrap();
        let sub = dense.subsample(&data, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(sub.len(), 20);
        assert!(sub.rows.iter().all(|r| r.video != "c" && r.values[0] == r.frame as f32 / 10.0));
        let sparse = sub.restrict_to(&data);
        assert!(sparse.subsample(&data, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn selection_is_seeded() {
        let lens = [17usize, 40, 3];
        let a = select_labeled_frames(&lens, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = select_labeled_frames(&lens, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&(v, f)| f < lens[v]));
    }
}
