use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Matrix, Result, Scalar};

/// One semantic vector per item, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub vectors: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(vectors: Matrix<T>) -> Result<Self> {
        if !vectors.is_finite() {
            return Err(Error::invalid("embedding table contains non-finite entries"));
        }
        Ok(Self { vectors })
    }

    pub fn item_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, item: usize) -> &[T] {
        self.vectors.row(item)
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            vectors: self.vectors.cast(),
        }
    }

    /// Binary layout: `item_count: u32 LE`, `dim: u32 LE`, then
    /// `item_count × dim` little-endian f32 values, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.vectors.len());
        out.extend_from_slice(&(self.item_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &x in self.vectors.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("embedding file shorter than its header".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + 4 * rows * dim;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "embedding file holds {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(Matrix::from_vec(rows, dim, data))
    }

    /// One JSON array of numbers per line.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<T>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            if let Some(first) = rows.first() {
                if first.len() != v.len() {
                    return Err(Error::Parse {
                        line: i as u64 + 1,
                        message: format!("row has {} values, expected {}", v.len(), first.len()),
                    });
                }
            }
            rows.push(v.into_iter().map(T::of).collect());
        }
        Self::new(Matrix::from_rows(&rows))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in 0..self.item_count() {
            let row: Vec<f64> = self.row(r).iter().map(|x| x.as_f64()).collect();
            out.push_str(&serde_json::to_string(&row).expect("numbers serialize"));
            out.push('\n');
        }
        out
    }

    /// Reads the binary format, or JSONL when the extension is `.jsonl`.
    pub fn read(path: &Path) -> Result<Self> {
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::from_jsonl(&text);
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            self.to_jsonl().into_bytes()
        } else {
            self.to_bytes()
        };
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_header_layout() {
        let t = EmbeddingTable::new(Matrix::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, -0.5])).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], &2u32.to_le_bytes());
        assert_eq!(&b[4..8], &3u32.to_le_bytes());
        assert_eq!(&b[8..12], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 8 + 24);
        assert_eq!(EmbeddingTable::<f32>::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn truncated_binary_rejected() {
        let t = EmbeddingTable::new(Matrix::from_vec(1, 2, vec![1.0f32, 2.0])).unwrap();
        let b = t.to_bytes();
        assert!(EmbeddingTable::<f32>::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(EmbeddingTable::new(Matrix::from_vec(1, 2, vec![1.0f64, f64::NAN])).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_ragged_rows() {
        let t = EmbeddingTable::<f64>::from_jsonl("[1, 2]\n[3.5, -1]\n").unwrap();
        assert_eq!(t.item_count(), 2);
        assert_eq!(EmbeddingTable::<f64>::from_jsonl(&t.to_jsonl()).unwrap(), t);
        assert!(EmbeddingTable::<f64>::from_jsonl("[1, 2]\n[3]\n").is_err());
    }
}
