use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const CHECKPOINT_MAGIC: &str = "nh2st-ckpt v1";

/// Named collection of matrices keyed by dotted path, iterated in
/// lexicographic path order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    leaves: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Default for ParamTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            leaves: BTreeMap::new(),
        }
    }

    /// Inserts a leaf, rejecting a path that is already present.
    pub fn insert(&mut self, path: impl Into<String>, value: Matrix<T>) -> Result<()> {
        let path = path.into();
        if path.is_empty() || path.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("bad parameter path {path:?}")));
        }
        if self.leaves.contains_key(&path) {
            return Err(Error::Duplicate {
                what: "parameter path",
                value: path,
            });
        }
        self.leaves.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Matrix<T>> {
        self.leaves.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Matrix<T>> {
        self.leaves.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Total number of scalar entries across all leaves.
    pub fn num_entries(&self) -> usize {
        self.leaves.values().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// Writes the checkpoint format: a magic line, one `path rows cols` line
    /// per leaf, a blank line, then little-endian `f64` blobs in header order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = String::from(CHECKPOINT_MAGIC);
        out.push('\n');
        for (path, m) in &self.leaves {
            out.push_str(&format!("{path} {} {}\n", m.rows(), m.cols()));
        }
        out.push('\n');
        let mut bytes = out.into_bytes();
        for m in self.leaves.values() {
            for &x in m.as_slice() {
                bytes.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::parse(origin, "missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::parse(origin, "header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::parse(origin, "bad magic line"));
        }
        let mut blob = &bytes[split + 2..];
        let mut tree = ParamTree::new();
        for line in lines {
            let fields: Vec<&str> = line.split(' ').collect();
            let [path, rows, cols] = fields[..] else {
                return Err(Error::parse(origin, format!("bad leaf line {line:?}")));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad row count in {line:?}")))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad column count in {line:?}")))?;
            let need = rows * cols * 8;
            if blob.len() < need {
                return Err(Error::parse(origin, format!("truncated data for {path}")));
            }
            let data = blob[..need]
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            blob = &blob[need..];
            tree.insert(path, Matrix::from_vec(rows, cols, data)?)?;
        }
        if !blob.is_empty() {
            return Err(Error::parse(origin, "trailing bytes after last leaf"));
        }
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}

pub(crate) fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A structure of learnable matrices that can be walked by path.
///
/// Implementors visit their leaves in a fixed order; the same order is used
/// by `visit` and `visit_mut`, which the optimizer and gradient accumulation
/// rely on.
pub trait Leaves<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>));

    fn to_tree(&self) -> ParamTree<T> {
        let mut tree = ParamTree::new();
        let mut dup = None;
        self.visit("", &mut |path, m| {
            if let Err(e) = tree.insert(path, m.clone()) {
                dup.get_or_insert(e);
            }
        });
        if let Some(e) = dup {
            panic!("parameter layout has a duplicate path: {e}");
        }
        tree
    }

    /// Overwrites every leaf from `tree`; every path must be present with a
    /// matching shape.
    fn load_tree(&mut self, tree: &ParamTree<T>) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |path, m| {
            if err.is_some() {
                return;
            }
            match tree.get(&path) {
                Some(src) if src.shape() == m.shape() => m.clone_from(src),
                Some(src) => {
                    err = Some(Error::shape(
                        "load_tree",
                        format!("{path}: expected {:?}, found {:?}", m.shape(), src.shape()),
                    ))
                }
                None => err = Some(Error::invalid(format!("missing parameter {path}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn leaf_refs(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |p, m| out.push((p, m)));
        out
    }

    fn num_entries(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn zero_out(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(T::zero()));
    }

    /// Element-wise `self += other` for two values of the same layout.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.leaf_refs();
        let mut i = 0;
        self.visit_mut("", &mut |_, m| {
            m.add_assign(src[i].1);
            i += 1;
        });
    }
}

impl<T: Scalar> Leaves<T> for ParamTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for (k, v) in &self.leaves {
            f(join_path(prefix, k), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        for (k, v) in self.leaves.iter_mut() {
            f(join_path(prefix, k), v);
        }
    }
}
