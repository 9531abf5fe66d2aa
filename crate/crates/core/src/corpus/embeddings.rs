use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Half-width of the uniform range for words without a pretrained vector.
pub const INIT_RANGE: f64 = 0.25;

/// Vectors read from a word2vec text file, restricted to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Reads a word2vec text file: a `<count> <dim>` header, then one
/// `word v1 .. vdim` row per line. Only words present in `vocab` are kept,
/// but every row is validated.
pub fn load_pretrained(path: &Path, vocab: &Vocab) -> Result<Pretrained> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path, 1, format!("bad header field `{s}`")))
    };
    let (count, dim) = match fields.as_slice() {
        [c, d] => (parse_usize(c)?, parse_usize(d)?),
        _ => return Err(Error::parse(path, 1, "header must be `<count> <dim>`")),
    };

    let mut vectors = HashMap::new();
    let mut rows = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        rows += 1;
        if rows > count {
            return Err(Error::parse(
                path,
                line_no,
                format!("header declares {count} rows but more are present"),
            ));
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let values = parts
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(path, line_no, format!("non-numeric field `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        if vocab.id(word) != super::UNK {
            vectors.insert(word.to_string(), values);
        }
    }
    if rows != count {
        return Err(Error::parse(
            path,
            rows + 1,
            format!("header declares {count} rows, found {rows}"),
        ));
    }
    Ok(Pretrained { dim, vectors })
}

/// Embedding table `[V, m]`. Every row is drawn from U[-0.25, 0.25), rows
/// with a pretrained vector are then overwritten, and the PAD row is zeroed.
pub fn init_embeddings<T: Real>(
    vocab: &Vocab,
    dim: usize,
    seed: u64,
    pretrained: Option<&Path>,
) -> Result<Tensor<T>> {
    let found = match pretrained {
        Some(path) => {
            let p = load_pretrained(path, vocab)?;
            if p.dim != dim {
                return Err(Error::invalid(format!(
                    "pretrained vectors have dimension {}, model expects {dim}",
                    p.dim
                )));
            }
            Some(p)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<T> = (0..vocab.len() * dim)
        .map(|_| T::from_f64_lossy(rng.gen_range(-INIT_RANGE..INIT_RANGE)))
        .collect();
    if let Some(p) = found {
        for (id, token) in vocab.tokens().iter().enumerate() {
            if let Some(v) = p.vectors.get(token) {
                for (dst, &src) in data[id * dim..(id + 1) * dim].iter_mut().zip(v) {
                    *dst = T::from_f64_lossy(src);
                }
            }
        }
    }
    data[PAD * dim..(PAD + 1) * dim].fill(T::zero());
    Tensor::new(vec![vocab.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::build(&[Sentence {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            label: 0,
        }])
    }

    fn write(body: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), body).unwrap();
        f
    }

    #[test]
    fn random_rows_in_uniform_range_and_pad_zero() {
        let v = vocab(&["a", "b", "c"]);
        let e = init_embeddings::<f64>(&v, 4, 1, None).unwrap();
        assert_eq!(e.shape(), &[6, 4]);
        for (i, x) in e.data().iter().enumerate() {
            if i < 4 {
                assert_eq!(*x, 0.0);
            } else {
                assert!((-0.25..0.25).contains(x));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let v = vocab(&["a", "b"]);
        let a = init_embeddings::<f64>(&v, 5, 9, None).unwrap();
        let b = init_embeddings::<f64>(&v, 5, 9, None).unwrap();
        let c = init_embeddings::<f64>(&v, 5, 10, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let v = vocab(&["good", "bad"]);
        let f = write("2 3\ngood 1 2 3\nother 4 5 6\n");
        let e = init_embeddings::<f64>(&v, 3, 0, Some(f.path())).unwrap();
        let good = v.id("good");
        assert_eq!(&e.data()[good * 3..good * 3 + 3], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn loader_keeps_vocabulary_words_only() {
        let v = vocab(&["apple"]);
        let f = write("2 3\napple 1 2 3\nbanana 4 5 6");
        let p = load_pretrained(f.path(), &v).unwrap();
        assert_eq!(p.dim, 3);
        assert_eq!(p.vectors.len(), 1);
        assert_eq!(p.vectors["apple"], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn loader_rejects_malformed_files() {
        let v = vocab(&["apple"]);
        for body in [
            "2 3\napple 1 2 3\nbanana 4 5 6\ncherry 7 8 9\n",
            "3 3\napple 1 2 3\n",
            "1 3\napple 1 2\n",
            "1 3\napple 1 x 3\n",
            "x 3\napple 1 2 3\n",
        ] {
            let f = write(body);
            assert!(load_pretrained(f.path(), &v).is_err(), "{body:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let v = vocab(&["apple"]);
        let f = write("1 3\napple 1 2 3\n");
        let err = init_embeddings::<f64>(&v, 4, 0, Some(f.path())).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }
}
