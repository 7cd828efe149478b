use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_pgm, path_string, preprocess, subject_dir, DataError, FaceImage};

pub const ORL_SUBJECTS: u32 = 40;
pub const ORL_SHOTS: u32 = 10;
pub const ORL_IMAGE_COUNT: usize = (ORL_SUBJECTS * ORL_SHOTS) as usize;

/// Loads `<root>/s<subject>/<shot>.pgm` for every subject directory present,
/// ordered by subject then shot.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<Vec<FaceImage>, DataError> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|source| DataError::Io {
        path: path_string(root),
        source,
    })?;
    let mut subjects: Vec<u32> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix('s')?.parse().ok())
        .collect();
    subjects.sort_unstable();

    let mut images = Vec::new();
    for subject in subjects {
        let dir = subject_dir(root, subject);
        let mut shots: Vec<u32> = std::fs::read_dir(&dir)
            .map_err(|source| DataError::Io {
                path: path_string(&dir),
                source,
            })?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".pgm")?.parse().ok())
            .collect();
        shots.sort_unstable();
        for shot in shots {
            let path = dir.join(format!("{shot}.pgm"));
            let raw = load_pgm(&path)?;
            images.push(preprocess(&raw)?.with_source(path_string(&path), subject, shot));
        }
    }
    Ok(images)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<FaceImage>,
    pub test: Vec<FaceImage>,
    pub seed: u64,
}

/// Seeded per-image shuffle of the full 400-image corpus; the first
/// `train_fraction` of the permutation is the training set.
pub fn split(images: Vec<FaceImage>, seed: u64, train_fraction: f64) -> Result<DataSplit, DataError> {
    if images.len() != ORL_IMAGE_COUNT {
        return Err(DataError::InvalidArgument(format!(
            "expected a corpus of {ORL_IMAGE_COUNT} images, found {}",
            images.len()
        )));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::InvalidArgument(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (images.len() as f64 * train_fraction).round() as usize;
    let mut slots: Vec<Option<FaceImage>> = images.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("permutation visits each index once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let test = order[n_train..].iter().map(&mut take).collect();
    Ok(DataSplit { train, test, seed })
}

/// Records the seed and each image's role, one `<path>\t<role>` per line.
pub fn write_manifest(split: &DataSplit, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = format!("# seed {}\n", split.seed);
    for (role, set) in [("train", &split.train), ("test", &split.test)] {
        for img in set {
            let _ = writeln!(out, "{}\t{role}", img.source_path);
        }
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path_string(path),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Genuine = 0,
    Impostor = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy)]
pub struct PairSample<'a> {
    pub a: &'a FaceImage,
    pub b: &'a FaceImage,
    pub label: PairLabel,
}

/// Draws genuine/impostor index pairs over a labelled image list.
///
/// Genuine pairs are two distinct images of one subject; the first image
/// is uniform over images whose subject has at least two images. Impostor
/// pairs are uniform over images with a partner of another subject.
#[derive(Debug, Clone)]
pub struct PairSampler {
    subjects: Vec<u32>,
    by_subject: BTreeMap<u32, Vec<usize>>,
    genuine_anchors: Vec<usize>,
}

impl PairSampler {
    pub fn new(subjects: &[u32]) -> Self {
        let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &s) in subjects.iter().enumerate() {
            by_subject.entry(s).or_default().push(i);
        }
        let genuine_anchors = (0..subjects.len())
            .filter(|&i| by_subject[&subjects[i]].len() >= 2)
            .collect();
        Self {
            subjects: subjects.to_vec(),
            by_subject,
            genuine_anchors,
        }
    }

    pub fn for_images(images: &[FaceImage]) -> Self {
        Self::new(&images.iter().map(|i| i.subject_id).collect::<Vec<_>>())
    }

    /// Checks that `genuine_fraction` can be honoured.
    pub fn validate(&self, genuine_fraction: f64) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&genuine_fraction) {
            return Err(DataError::InvalidArgument(format!(
                "genuine fraction {genuine_fraction} outside [0, 1]"
            )));
        }
        if self.subjects.is_empty() {
            return Err(DataError::InvalidArgument("cannot sample pairs from an empty set".into()));
        }
        if genuine_fraction > 0.0 && self.genuine_anchors.is_empty() {
            return Err(DataError::InvalidArgument(
                "genuine pairs requested but no subject has two images".into(),
            ));
        }
        if genuine_fraction < 1.0 && self.by_subject.len() < 2 {
            return Err(DataError::InvalidArgument(
                "impostor pairs requested but only one subject is present".into(),
            ));
        }
        Ok(())
    }

    pub fn draw(&self, genuine_fraction: f64, rng: &mut impl Rng) -> PairIndex {
        let genuine = rng.gen_bool(genuine_fraction);
        if genuine {
            let a = self.genuine_anchors[rng.gen_range(0..self.genuine_anchors.len())];
            let peers = &self.by_subject[&self.subjects[a]];
            loop {
                let b = peers[rng.gen_range(0..peers.len())];
                if b != a {
                    return PairIndex {
                        a,
                        b,
                        label: PairLabel::Genuine,
                    };
                }
            }
        } else {
            let a = rng.gen_range(0..self.subjects.len());
            loop {
                let b = rng.gen_range(0..self.subjects.len());
                if self.subjects[b] != self.subjects[a] {
                    return PairIndex {
                        a,
                        b,
                        label: PairLabel::Impostor,
                    };
                }
            }
        }
    }

    pub fn draw_many(&self, count: usize, genuine_fraction: f64, rng: &mut impl Rng) -> Result<Vec<PairIndex>, DataError> {
        self.validate(genuine_fraction)?;
        Ok((0..count).map(|_| self.draw(genuine_fraction, rng)).collect())
    }
}

/// `count` seeded pairs, each genuine with probability `genuine_fraction`.
pub fn sample_pairs(
    images: &[FaceImage],
    count: usize,
    genuine_fraction: f64,
    seed: u64,
) -> Result<Vec<PairSample<'_>>, DataError> {
    let sampler = PairSampler::for_images(images);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler
        .draw_many(count, genuine_fraction, &mut rng)?
        .into_iter()
        .map(|p| PairSample {
            a: &images[p.a],
            b: &images[p.b],
            label: p.label,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn fake_corpus() -> Vec<FaceImage> {
        let mut out = Vec::new();
        for s in 1..=ORL_SUBJECTS {
            for k in 1..=ORL_SHOTS {
                let img = FaceImage::from_pixels(vec![0.0; 100 * 100])
                    .unwrap()
                    .with_source(format!("s{s}/{k}.pgm"), s, k);
                out.push(img);
            }
        }
        out
    }

    fn members(set: &[FaceImage]) -> HashSet<String> {
        set.iter().map(|i| i.source_path.clone()).collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let a = split(fake_corpus(), 7, 0.9).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (360, 40));
        let b = split(fake_corpus(), 7, 0.9).unwrap();
        assert_eq!(a, b);
        let c = split(fake_corpus(), 8, 0.9).unwrap();
        assert_ne!(members(&a.test), members(&c.test));
    }

    #[test]
    fn split_rejects_wrong_corpus_size() {
        let mut imgs = fake_corpus();
        imgs.pop();
        let err = split(imgs, 1, 0.9).unwrap_err();
        assert!(err.to_string().contains("399"), "{err}");
    }

    #[test]
    fn split_partitions_for_many_seeds() {
        let all = members(&fake_corpus());
        for seed in 0..24 {
            let s = split(fake_corpus(), seed, 0.9).unwrap();
            let tr = members(&s.train);
            let te = members(&s.test);
            assert!(tr.is_disjoint(&te));
            assert_eq!(tr.union(&te).cloned().collect::<HashSet<_>>(), all);
        }
    }

    #[test]
    fn pair_fractions_at_the_extremes() {
        let imgs = fake_corpus();
        let all_genuine = sample_pairs(&imgs, 10, 1.0, 3).unwrap();
        assert!(all_genuine.iter().all(|p| p.a.subject_id == p.b.subject_id && p.label == PairLabel::Genuine));
        assert!(all_genuine.iter().all(|p| p.a.source_path != p.b.source_path));
        let all_impostor = sample_pairs(&imgs, 10, 0.0, 3).unwrap();
        assert!(all_impostor.iter().all(|p| p.a.subject_id != p.b.subject_id));
    }

    #[test]
    fn balanced_pairs_concentrate_and_are_labelled_by_subject() {
        let imgs = fake_corpus();
        let pairs = sample_pairs(&imgs, 10_000, 0.5, 11).unwrap();
        let genuine = pairs.iter().filter(|p| p.label == PairLabel::Genuine).count();
        let share = genuine as f64 / pairs.len() as f64;
        assert!((0.45..=0.55).contains(&share), "{share}");
        let mislabeled = pairs
            .iter()
            .filter(|p| (p.a.subject_id == p.b.subject_id) != (p.label == PairLabel::Genuine))
            .count();
        assert_eq!(mislabeled, 0);
    }

    #[test]
    fn impossible_requests_are_errors() {
        let imgs = fake_corpus();
        let singles: Vec<FaceImage> = imgs.iter().filter(|i| i.shot_id == 1).cloned().collect();
        assert!(sample_pairs(&singles, 5, 0.5, 0).is_err());
        assert!(sample_pairs(&singles, 5, 0.0, 0).is_ok());
        let one_subject: Vec<FaceImage> = imgs.iter().filter(|i| i.subject_id == 1).cloned().collect();
        assert!(sample_pairs(&one_subject, 5, 0.5, 0).is_err());
        assert!(sample_pairs(&[], 1, 1.0, 0).is_err());
    }

    #[test]
    fn manifest_lists_every_image_once() {
        let s = split(fake_corpus(), 2, 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write_manifest(&s, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# seed 2"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 400);
        assert_eq!(rows.iter().filter(|l| l.ends_with("\ttest")).count(), 40);
    }
}
