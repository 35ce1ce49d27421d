//! On-disk formats.
//!
//! - `interactions.tsv`: `user<TAB>item` per line.
//! - `bundles.tsv`: `bundle<TAB>item` per line; item order follows the file.
//! - `*.bndf`: magic `BNDF`, `u32` LE row count, `u32` LE width, then
//!   row-major `f32` LE values in dense item order. A CSV table with header
//!   `item_id,v0,...` is accepted instead when the magic is absent.
//! - `idmap.tsv`: `external_id<TAB>dense_id`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;

use super::{Bundle, BundleTable, IdMap, InteractionMatrix, ItemCorpus};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"BNDF";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const BUNDLES_FILE: &str = "bundles.tsv";
pub const TEXT_FILE: &str = "text.bndf";
pub const MEDIA_FILE: &str = "media.bndf";
pub const IDMAP_FILE: &str = "idmap.tsv";

struct PairLine {
    line: usize,
    left: String,
    right: String,
}

fn read_pairs(path: &Path) -> Result<Vec<PairLine>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        if !trimmed.contains('\t') {
            if trimmed.contains([',', ';', '|', ' ']) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {lineno}: expected TAB-separated fields"),
                });
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "expected two TAB-separated fields".into(),
            });
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected two non-empty fields, got {}", fields.len()),
            });
        }
        out.push(PairLine {
            line: lineno,
            left: fields[0].trim().to_string(),
            right: fields[1].trim().to_string(),
        });
    }
    Ok(out)
}

/// Reads `user<TAB>item` lines into a binary matrix; ids are densified in
/// order of first appearance.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionMatrix> {
    load_interactions_with(path, &mut IdMap::new(), &mut IdMap::new(), false)
}

/// As [`load_interactions`], resolving ids through the given maps. With
/// `fixed_items`, an item missing from `items` is an error rather than a new
/// id.
pub fn load_interactions_with(
    path: impl AsRef<Path>,
    users: &mut IdMap,
    items: &mut IdMap,
    fixed_items: bool,
) -> Result<InteractionMatrix> {
    let path = path.as_ref();
    let lines = read_pairs(path)?;
    if lines.is_empty() {
        warn!("{}: no interactions", path.display());
    }
    let mut pairs = Vec::with_capacity(lines.len());
    for l in &lines {
        let i = resolve_item(path, l, items, fixed_items)?;
        pairs.push((users.intern(&l.left), i));
    }
    InteractionMatrix::from_pairs(users.len(), items.len(), &pairs)
}

fn resolve_item(path: &Path, l: &PairLine, items: &mut IdMap, fixed: bool) -> Result<usize> {
    if fixed {
        items.dense(&l.right).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: l.line,
            msg: format!("unknown item `{}`", l.right),
        })
    } else {
        Ok(items.intern(&l.right))
    }
}

pub fn save_interactions(
    path: impl AsRef<Path>,
    d: &InteractionMatrix,
    users: &IdMap,
    items: &IdMap,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (u, i) in d.pairs() {
        writeln!(w, "{}\t{}", users.external(u), items.external(i))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `bundle<TAB>item` lines. Duplicate pairs collapse; bundles left
/// with fewer than two items are dropped with a warning.
pub fn load_bundles(path: impl AsRef<Path>) -> Result<(BundleTable, IdMap)> {
    let mut items = IdMap::new();
    let table = load_bundles_with(path, &mut items, false)?;
    Ok((table, items))
}

pub fn load_bundles_with(
    path: impl AsRef<Path>,
    items: &mut IdMap,
    fixed_items: bool,
) -> Result<BundleTable> {
    let path = path.as_ref();
    let lines = read_pairs(path)?;
    if lines.is_empty() {
        warn!("{}: no bundles", path.display());
    }
    let mut bundle_ids = IdMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for l in &lines {
        let b = bundle_ids.intern(&l.left);
        if b == members.len() {
            members.push(Vec::new());
        }
        let i = resolve_item(path, l, items, fixed_items)?;
        if !members[b].contains(&i) {
            members[b].push(i);
        }
    }
    let mut bundles = Vec::with_capacity(members.len());
    for (b, items_of) in members.into_iter().enumerate() {
        let id = bundle_ids.external(b).to_string();
        if items_of.len() < 2 {
            warn!("{}: dropping bundle `{id}` with fewer than two items", path.display());
            continue;
        }
        bundles.push(Bundle { id, items: items_of });
    }
    BundleTable::new(bundles, items.len())
}

pub fn save_bundles(path: impl AsRef<Path>, table: &BundleTable, items: &IdMap) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for b in table.iter() {
        for &i in &b.items {
            writeln!(w, "{}\t{}", b.id, items.external(i))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature table in the binary layout, or CSV when the magic is
/// absent.
pub fn load_features(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(FEATURE_MAGIC) {
        decode_features(path, &bytes)
    } else {
        parse_feature_csv(path, &bytes)
    }
}

fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 {
        return Err(bad("truncated header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != n * dim * 4 {
        return Err(bad(format!(
            "expected {} payload bytes for {n}x{dim}, found {}",
            n * dim * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(n, dim, data)
}

fn parse_feature_csv(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "neither BNDF magic nor UTF-8 CSV".into(),
    })?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: "empty feature file".into(),
    })?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 || !header.trim_start().starts_with("item_id") {
        return Err(parse_err(1, "header must be `item_id,v0,...`".into()));
    }
    let mut rows: Vec<(usize, Vec<f32>)> = Vec::new();
    for (k, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(k + 1, format!("expected {} fields", dim + 1)));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(k + 1, format!("bad item id `{}`", fields[0])))?;
        let vals = fields[1..]
            .iter()
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(k + 1, e.to_string()))?;
        rows.push((id, vals));
    }
    let n = rows.len();
    let mut out = Tensor::zeros(n, dim);
    let mut seen = vec![false; n];
    for (id, vals) in rows {
        if id >= n || seen[id] {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("item ids must cover 0..{n} exactly once (saw {id})"),
            });
        }
        seen[id] = true;
        out.row_mut(id).copy_from_slice(&vals);
    }
    Ok(out)
}

pub fn save_features(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(t.rows() as u32).to_le_bytes())?;
    w.write_all(&(t.cols() as u32).to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_idmap(path: impl AsRef<Path>) -> Result<IdMap> {
    let path = path.as_ref();
    let lines = read_pairs(path)?;
    let mut ext = vec![None; lines.len()];
    for l in &lines {
        let dense: usize = l.right.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: l.line,
            msg: format!("bad dense id `{}`", l.right),
        })?;
        if dense >= ext.len() || ext[dense].is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: l.line,
                msg: format!("dense ids must cover 0..{} exactly once", ext.len()),
            });
        }
        ext[dense] = Some(l.left.clone());
    }
    IdMap::from_external(ext.into_iter().map(|e| e.expect("covered")).collect())
}

pub fn save_idmap(path: impl AsRef<Path>, ids: &IdMap) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (dense, ext) in ids.iter() {
        writeln!(w, "{ext}\t{dense}")?;
    }
    w.flush()?;
    Ok(())
}

/// A complete bundling dataset sharing one dense item space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: ItemCorpus,
    pub bundles: BundleTable,
    pub interactions: InteractionMatrix,
    pub users: IdMap,
}

impl Dataset {
    pub fn n_items(&self) -> usize {
        self.corpus.n_items()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        save_idmap(dir.join(IDMAP_FILE), &self.corpus.ids)?;
        save_interactions(
            dir.join(INTERACTIONS_FILE),
            &self.interactions,
            &self.users,
            &self.corpus.ids,
        )?;
        save_bundles(dir.join(BUNDLES_FILE), &self.bundles, &self.corpus.ids)?;
        save_features(dir.join(TEXT_FILE), &self.corpus.text)?;
        save_features(dir.join(MEDIA_FILE), &self.corpus.media)?;
        Ok(())
    }

    /// Loads a dataset directory. Without `idmap.tsv`, item ids are assigned
    /// by first appearance in bundles then interactions, and the map is
    /// written out.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let need = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} not found", p.display()),
                )))
            }
        };
        let idmap_path = dir.join(IDMAP_FILE);
        let fixed = idmap_path.exists();
        let mut items = if fixed {
            load_idmap(&idmap_path)?
        } else {
            IdMap::new()
        };
        let bundles = load_bundles_with(need(BUNDLES_FILE)?, &mut items, fixed)?;
        let mut users = IdMap::new();
        let interactions =
            load_interactions_with(need(INTERACTIONS_FILE)?, &mut users, &mut items, fixed)?;
        if !fixed {
            save_idmap(&idmap_path, &items)?;
        }
        let text = load_features(need(TEXT_FILE)?)?;
        let media = load_features(need(MEDIA_FILE)?)?;
        // Interactions may reference items the bundles never mention.
        let bundles = BundleTable::new(bundles.iter().cloned().collect(), items.len())?;
        let interactions = InteractionMatrix::from_pairs(
            interactions.n_users(),
            items.len(),
            &interactions.pairs().collect::<Vec<_>>(),
        )?;
        let corpus = ItemCorpus::new(items, text, media)?;
        Ok(Self {
            corpus,
            bundles,
            interactions,
            users,
        })
    }

    /// FNV-1a over a canonical rendering of every field.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for (_, ext) in self.corpus.ids.iter() {
            h.write(ext.as_bytes());
            h.write(&[0]);
        }
        for t in [&self.corpus.text, &self.corpus.media] {
            h.write(&(t.rows() as u64).to_le_bytes());
            h.write(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        for b in self.bundles.iter() {
            h.write(b.id.as_bytes());
            for &i in &b.items {
                h.write(&(i as u64).to_le_bytes());
            }
        }
        for (u, i) in self.interactions.pairs() {
            h.write(self.users.external(u).as_bytes());
            h.write(&(i as u64).to_le_bytes());
        }
        h.finish()
    }
}

pub(crate) struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn interactions_deduplicate() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.tsv", "u1\ti1\nu1\ti1\nu2\ti3\n");
        let d = load_interactions(&p).unwrap();
        assert_eq!(d.nnz(), 2);
        assert_eq!((d.n_users(), d.n_items()), (2, 2));
        assert_eq!(d.item_counts(), &[1, 1]);
    }

    #[test]
    fn empty_interactions_is_zero_by_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.tsv", "");
        let d = load_interactions(&p).unwrap();
        assert_eq!((d.n_users(), d.n_items(), d.nnz()), (0, 0, 0));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.tsv", "u1\ti1\nu2\ti2\tx\n");
        match load_interactions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(dir.path(), "c.tsv", "u1,i1\n");
        assert!(matches!(load_interactions(&p), Err(Error::Format { .. })));
        let p = write(dir.path(), "s.tsv", "u1\ti1\nlonely\n");
        assert!(matches!(load_interactions(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn bundles_round_trip_and_drop_small() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "b.tsv",
            "b0\t0\nb0\t1\nb1\t1\nb1\t2\nb1\t3\nb1\t2\nb2\t3\n",
        );
        let (table, items) = load_bundles(&p).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.get(1).items, vec![1, 2, 3]);
        let out = dir.path().join("b2.tsv");
        save_bundles(&out, &table, &items).unwrap();
        assert_eq!(
            fs::read_to_string(&out).unwrap(),
            "b0\t0\nb0\t1\nb1\t1\nb1\t2\nb1\t3\n"
        );
        let (again, _) = load_bundles(&out).unwrap();
        assert_eq!(again, table);
    }

    #[test]
    fn feature_binary_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(4, 8, (0..32).map(|v| v as f32 * 0.25 - 1.0).collect()).unwrap();
        let p = dir.path().join("f.bndf");
        save_features(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"BNDF");
        assert_eq!(&bytes[4..12], &[4, 0, 0, 0, 8, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 32 * 4);
        assert_eq!(load_features(&p).unwrap(), t);

        let csv = write(dir.path(), "f.csv", "item_id,v0,v1\n1,3.5,4\n0,1,2\n");
        let c = load_features(&csv).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.5, 4.0]);

        let truncated = dir.path().join("t.bndf");
        fs::write(&truncated, &bytes[..20]).unwrap();
        assert!(matches!(load_features(&truncated), Err(Error::Format { .. })));
    }

    #[test]
    fn idmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids = IdMap::from_external(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let p = dir.path().join("idmap.tsv");
        save_idmap(&p, &ids).unwrap();
        assert_eq!(load_idmap(&p).unwrap(), ids);
    }
}
