//! Enrolled face records and nearest-embedding search.
//!
//! Records are append-only and user ids are deliberately not unique: one
//! person enrolled several times can fill several of the top-k slots, which
//! is what downstream confidence heuristics look for.
//!
//! Binary file layout (little-endian):
//!
//! ```text
//! "SFGAL1"  u32 dim
//! repeated until EOF:
//!   u16 id_len  id_len bytes of UTF-8  i64 enrolled_at (unix ms)  dim × f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::siamese::{euclidean_distance, Embedding, EMBEDDING_DIM};

pub const GALLERY_MAGIC: &[u8; 6] = b"SFGAL1";

#[derive(Debug, thiserror::Error)]
pub enum GalleryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: row {row}: {reason}")]
    Format { path: String, row: u64, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = GalleryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GalleryRecord {
    pub user_id: String,
    pub embedding: Embedding,
    /// Milliseconds since the Unix epoch.
    pub enrolled_at: i64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Match {
    pub user_id: String,
    pub distance: f64,
    /// Enrollment index of the matched record.
    pub index: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Gallery {
    records: Vec<GalleryRecord>,
    path: Option<PathBuf>,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn io_error(path: &str) -> impl FnOnce(io::Error) -> GalleryError + '_ {
    move |source| GalleryError::Io {
        path: path.to_string(),
        source,
    }
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty gallery that [`flush`](Self::flush) writes to `path`.
    pub fn with_path(path: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            path: Some(path.into()),
        }
    }

    /// Loads `path` if it exists, otherwise starts empty; either way the
    /// gallery flushes back to `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut g = if path.exists() { Self::load(&path)? } else { Self::new() };
        g.path = Some(path);
        Ok(g)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[GalleryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record stamped with the current time; returns its index.
    pub fn enroll(&mut self, user_id: &str, embedding: Embedding) -> Result<usize> {
        self.enroll_at(user_id, embedding, now_ms())
    }

    pub fn enroll_at(&mut self, user_id: &str, embedding: Embedding, enrolled_at: i64) -> Result<usize> {
        validate_id(user_id)?;
        self.records.push(GalleryRecord {
            user_id: user_id.to_string(),
            embedding,
            enrolled_at,
        });
        Ok(self.records.len() - 1)
    }

    /// The `k` records nearest to `probe`, ascending by distance with ties
    /// going to the earlier enrollment. Every record is scanned.
    pub fn top_k(&self, probe: &Embedding, k: usize) -> Result<Vec<Match>> {
        if k == 0 {
            return Err(GalleryError::InvalidArgument("k must be at least 1".into()));
        }
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (euclidean_distance(probe, &r.embedding), i))
            .collect();
        let order = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(distance, index)| Match {
                user_id: self.records[index].user_id.clone(),
                distance,
                index,
            })
            .collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(GALLERY_MAGIC)?;
        w.write_all(&(EMBEDDING_DIM as u32).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.user_id.len() as u16).to_le_bytes())?;
            w.write_all(r.user_id.as_bytes())?;
            w.write_all(&r.enrolled_at.to_le_bytes())?;
            for v in r.embedding.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses the binary format. `origin` names the source in errors.
    pub fn read_from(r: &mut impl Read, origin: &str) -> Result<Self> {
        let fmt = |row: u64, reason: String| GalleryError::Format {
            path: origin.to_string(),
            row,
            reason,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io_error(origin))?;
        if bytes.len() < 10 || &bytes[..6] != GALLERY_MAGIC {
            return Err(fmt(0, "missing SFGAL1 header".into()));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        if dim as usize != EMBEDDING_DIM {
            return Err(fmt(0, format!("embedding dimension {dim}, expected {EMBEDDING_DIM}")));
        }
        let mut records = Vec::new();
        let mut pos = 10;
        let mut row = 1u64;
        while pos < bytes.len() {
            let mut take = |n: usize| -> Result<&[u8]> {
                let s = bytes
                    .get(pos..pos + n)
                    .ok_or_else(|| fmt(row, "truncated record".into()))?;
                pos += n;
                Ok(s)
            };
            let id_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let user_id = std::str::from_utf8(take(id_len)?)
                .map_err(|_| fmt(row, "user id is not UTF-8".into()))?
                .to_string();
            let enrolled_at = i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let mut values = [0f32; EMBEDDING_DIM];
            for v in &mut values {
                *v = f32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            }
            validate_id(&user_id).map_err(|e| fmt(row, e.to_string()))?;
            let embedding = Embedding::new(values).map_err(|e| fmt(row, e.to_string()))?;
            records.push(GalleryRecord {
                user_id,
                embedding,
                enrolled_at,
            });
            row += 1;
        }
        Ok(Self { records, path: None })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(io_error(&name))?);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(io_error(&name))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let f = File::open(path).map_err(io_error(&name))?;
        Self::read_from(&mut BufReader::new(f), &name)
    }

    /// Writes to the storage path, if one is set.
    pub fn flush(&self) -> Result<()> {
        match &self.path {
            Some(p) => self.save(p),
            None => Ok(()),
        }
    }

    /// CSV with header `ID,Vector1,…,Vector5`; floats in shortest
    /// round-trip form (at most 9 significant digits for `f32`).
    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["ID".to_string()];
        header.extend((1..=EMBEDDING_DIM).map(|i| format!("Vector{i}")));
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.user_id.clone()];
            row.extend(r.embedding.values().iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses CSV written by [`write_csv`](Self::write_csv). Imported
    /// records are stamped with the import time.
    pub fn read_csv(r: impl Read, origin: &str) -> Result<Self> {
        let fmt = |row: u64, reason: String| GalleryError::Format {
            path: origin.to_string(),
            row,
            reason,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
        let header = rdr.headers().map_err(|e| fmt(1, e.to_string()))?.clone();
        let want: Vec<String> = std::iter::once("ID".to_string())
            .chain((1..=EMBEDDING_DIM).map(|i| format!("Vector{i}")))
            .collect();
        if header.iter().ne(want.iter().map(String::as_str)) {
            return Err(fmt(1, format!("header must be {}", want.join(","))));
        }
        let stamp = now_ms();
        let mut g = Self::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                fmt(line, e.to_string())
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != EMBEDDING_DIM + 1 {
                return Err(fmt(line, format!("expected {} columns, found {}", EMBEDDING_DIM + 1, rec.len())));
            }
            let mut values = [0f32; EMBEDDING_DIM];
            for (i, v) in values.iter_mut().enumerate() {
                let field = &rec[i + 1];
                *v = field
                    .trim()
                    .parse()
                    .map_err(|_| fmt(line, format!("Vector{} is not a number: {field:?}", i + 1)))?;
            }
            let embedding = Embedding::new(values).map_err(|e| fmt(line, e.to_string()))?;
            g.enroll_at(&rec[0], embedding, stamp).map_err(|e| fmt(line, e.to_string()))?;
        }
        Ok(g)
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let f = File::create(path).map_err(io_error(&name))?;
        self.write_csv(BufWriter::new(f)).map_err(|e| GalleryError::Io {
            path: name.clone(),
            source: io::Error::other(e),
        })
    }

    pub fn import_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let f = File::open(path).map_err(io_error(&name))?;
        Self::read_csv(BufReader::new(f), &name)
    }
}

fn validate_id(user_id: &str) -> Result<()> {
    if user_id.is_empty() {
        return Err(GalleryError::InvalidArgument("user id must not be empty".into()));
    }
    if user_id.len() > u16::MAX as usize {
        return Err(GalleryError::InvalidArgument("user id longer than 65535 bytes".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: [f32; 5]) -> Embedding {
        Embedding::new(v).unwrap()
    }

    fn random_gallery(rng: &mut ChaCha8Rng, n: usize, ids: u32) -> Gallery {
        let mut g = Gallery::new();
        for i in 0..n {
            let v: [f32; 5] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            g.enroll_at(&rng.gen_range(1..=ids).to_string(), emb(v), i as i64).unwrap();
        }
        g
    }

    /// Full stable sort of every record by distance.
    fn oracle(g: &Gallery, probe: &Embedding, k: usize) -> Vec<Match> {
        let mut all: Vec<Match> = g
            .records()
            .iter()
            .enumerate()
            .map(|(index, r)| Match {
                user_id: r.user_id.clone(),
                distance: euclidean_distance(probe, &r.embedding),
                index,
            })
            .collect();
        all.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
        all.truncate(k);
        all
    }

    #[test]
    fn repeated_ids_are_kept() {
        let mut g = Gallery::new();
        for i in 0..10 {
            g.enroll("9", emb([i as f32, 0.0, 0.0, 0.0, 0.0])).unwrap();
        }
        assert_eq!(g.len(), 10);
        assert!(g.records().iter().all(|r| r.user_id == "9"));
        assert_eq!(g.top_k(&emb([0.0; 5]), 10).unwrap().len(), 10);
    }

    #[test]
    fn enroll_validation() {
        let mut g = Gallery::new();
        assert!(matches!(g.enroll("", emb([0.0; 5])), Err(GalleryError::InvalidArgument(_))));
        assert!(Embedding::new([f32::NAN, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert_eq!(g.enroll("a", emb([0.0; 5])).unwrap(), 0);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn exact_probe_matches_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = random_gallery(&mut rng, 20, 5);
        let probe = emb([0.25, -1.0, 2.0, 0.5, 0.0]);
        g.enroll("target", probe).unwrap();
        let m = g.top_k(&probe, 3).unwrap();
        assert_eq!((m[0].user_id.as_str(), m[0].distance), ("target", 0.0));
    }

    #[test]
    fn one_identity_can_fill_the_top_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = random_gallery(&mut rng, 30, 8);
        for i in 0..10 {
            g.enroll("10", emb([9.0 + 0.01 * i as f32, 9.0, 9.0, 9.0, 9.0])).unwrap();
        }
        let m = g.top_k(&emb([9.0; 5]), 3).unwrap();
        assert_eq!(m.iter().filter(|x| x.user_id == "10").count(), 3);
    }

    #[test]
    fn edge_cases() {
        let g = Gallery::new();
        assert!(g.top_k(&emb([0.0; 5]), 3).unwrap().is_empty());
        assert!(g.top_k(&emb([0.0; 5]), 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gallery(&mut rng, 2, 2);
        assert_eq!(g.top_k(&emb([0.0; 5]), 5).unwrap().len(), 2);
    }

    #[test]
    fn ties_go_to_earlier_enrollment() {
        let mut g = Gallery::new();
        for id in ["c", "a", "b", "d"] {
            g.enroll(id, emb([1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        }
        let ids: Vec<_> = g.top_k(&emb([0.0; 5]), 3).unwrap().into_iter().map(|m| m.user_id).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn fifty_record_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_gallery(&mut rng, 50, 10);
        let probe = emb([0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(g.top_k(&probe, 3).unwrap(), oracle(&g, &probe, 3));
    }

    #[test]
    fn binary_round_trip_is_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gallery(&mut rng, 400, 40);
        let mut first = Vec::new();
        g.write_to(&mut first).unwrap();
        let back = Gallery::read_from(&mut first.as_slice(), "mem").unwrap();
        assert_eq!(back.records(), g.records());
        let mut second = Vec::new();
        back.write_to(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn header_only_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        Gallery::new().save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 10);
        assert!(Gallery::load(&p).unwrap().is_empty());
    }

    #[test]
    fn open_creates_and_flushes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let mut g = Gallery::open(&p).unwrap();
        g.enroll("1", emb([1.0; 5])).unwrap();
        g.flush().unwrap();
        assert_eq!(Gallery::open(&p).unwrap().len(), g.len());
    }

    #[test]
    fn corrupt_binary_names_the_row() {
        let mut g = Gallery::new();
        g.enroll("1", emb([1.0; 5])).unwrap();
        g.enroll("2", emb([2.0; 5])).unwrap();
        let mut bytes = Vec::new();
        g.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        match Gallery::read_from(&mut bytes.as_slice(), "g.bin") {
            Err(GalleryError::Format { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Gallery::read_from(&mut &b"SFGAL2\x05\0\0\0"[..], "x"),
            Err(GalleryError::Format { row: 0, .. })
        ));
    }

    #[test]
    fn csv_rows() {
        let mut g = Gallery::new();
        g.enroll("9", emb([0.0; 5])).unwrap();
        g.enroll("x", emb([1.5, -0.25, 1e-7, 3.0, 0.1])).unwrap();
        let mut out = Vec::new();
        g.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "ID,Vector1,Vector2,Vector3,Vector4,Vector5");
        assert_eq!(lines[1], "9,0,0,0,0,0");
        assert_eq!(lines.len() - 1, g.len());
        let back = Gallery::read_csv(text.as_bytes(), "mem").unwrap();
        for (a, b) in back.records().iter().zip(g.records()) {
            assert_eq!(a.embedding, b.embedding);
            assert_eq!(a.user_id, b.user_id);
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        let bad = "ID,Vector1,Vector2,Vector3,Vector4,Vector5\n1,0,0,0,0,0\n2,0,0,0\n";
        match Gallery::read_csv(bad.as_bytes(), "g.csv") {
            Err(GalleryError::Format { row, reason, .. }) => {
                assert_eq!(row, 3);
                assert!(reason.contains("columns"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        let nan = "ID,Vector1,Vector2,Vector3,Vector4,Vector5\n1,x,0,0,0,0\n";
        assert!(matches!(Gallery::read_csv(nan.as_bytes(), "g.csv"), Err(GalleryError::Format { row: 2, .. })));
        assert!(Gallery::read_csv("ID,V\n".as_bytes(), "g.csv").is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_exhaustive_oracle(seed: u64, n in 0usize..300, k in prop::sample::select(vec![1usize, 3, 10])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse grid so exact distance ties are common
            let mut g = Gallery::new();
            for i in 0..n {
                let v: [f32; 5] = std::array::from_fn(|_| rng.gen_range(-2..=2) as f32);
                g.enroll_at(&(i % 7).to_string(), emb(v), 0).unwrap();
            }
            let probe = emb(std::array::from_fn(|_| rng.gen_range(-2..=2) as f32));
            let got = g.top_k(&probe, k).unwrap();
            prop_assert_eq!(&got, &oracle(&g, &probe, k));
            if let Some(last) = got.last() {
                let kept: std::collections::HashSet<_> = got.iter().map(|m| m.index).collect();
                for (i, r) in g.records().iter().enumerate() {
                    if !kept.contains(&i) {
                        prop_assert!(euclidean_distance(&probe, &r.embedding) >= last.distance);
                    }
                }
            }
        }

        #[test]
        fn csv_round_trip_keeps_distances(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gallery(&mut rng, 30, 5);
            let mut out = Vec::new();
            g.write_csv(&mut out).unwrap();
            let back = Gallery::read_csv(out.as_slice(), "mem").unwrap();
            let probe = emb(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)));
            for (a, b) in g.records().iter().zip(back.records()) {
                let drift = (euclidean_distance(&probe, &a.embedding) - euclidean_distance(&probe, &b.embedding)).abs();
                prop_assert!(drift < 1e-6);
            }
        }
    }
}
