//! Binary parameter checkpoints.
//!
//! Layout: the line `ODEFMT1`, then for every parameter in lexicographic
//! name order a text line `<name> <f32|f64> <rank> <dims...>` followed by
//! the raw little-endian values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use odeformer_core::tensor::{ParamStore, Tensor};
use odeformer_core::Scalar;

pub const MAGIC: &str = "ODEFMT1";

pub fn write_to<T: Scalar, W: Write>(params: &ParamStore<T>, mut out: W) -> anyhow::Result<()> {
    writeln!(out, "{MAGIC}")?;
    for (name, t) in params.iter() {
        if name.is_empty() || name.contains(char::is_whitespace) {
            bail!("parameter name '{name}' cannot be stored");
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {} {} {}", T::DTYPE, t.rank(), dims.join(" "))?;
        for v in t.data() {
            match T::DTYPE {
                "f32" => out.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                _ => out.write_all(&v.as_f64().to_le_bytes())?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint into element type `T`; values stored at the other
/// precision are converted.
pub fn read_from<T: Scalar, R: BufRead>(mut input: R) -> anyhow::Result<ParamStore<T>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        bail!("not an {MAGIC} checkpoint");
    }
    let mut store = ParamStore::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let mut fields = line.split_ascii_whitespace();
        let (Some(name), Some(dtype), Some(rank)) = (fields.next(), fields.next(), fields.next()) else {
            bail!("malformed parameter header '{}'", line.trim_end());
        };
        let rank: usize = rank.parse().context("parameter rank")?;
        let dims: Vec<usize> = fields.map(str::parse).collect::<Result<_, _>>().context("parameter dims")?;
        if dims.len() != rank {
            bail!("parameter {name}: rank {rank} but {} dims", dims.len());
        }
        let n: usize = dims.iter().product();
        let data: Vec<T> = match dtype {
            "f32" => {
                let mut buf = vec![0u8; 4 * n];
                input.read_exact(&mut buf).with_context(|| format!("values of {name}"))?;
                buf.chunks_exact(4).map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect()
            }
            "f64" => {
                let mut buf = vec![0u8; 8 * n];
                input.read_exact(&mut buf).with_context(|| format!("values of {name}"))?;
                buf.chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
                    .collect()
            }
            other => bail!("parameter {name}: unknown dtype '{other}'"),
        };
        let tensor = Tensor::new(&dims, data)?.with_requires_grad(true);
        store.insert(name, tensor)?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_to(params, BufWriter::new(file))
}

pub fn load<T: Scalar>(path: &Path) -> anyhow::Result<ParamStore<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.1, 1e-30, -0.0]).unwrap()).unwrap();
        s.insert("a.gain", Tensor::from_f64(&[1], &[7.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let mut buf = Vec::new();
        write_to(&store(), &mut buf).unwrap();
        let back: ParamStore<f64> = read_from(&buf[..]).unwrap();
        assert!(back.same_values(&store()));
    }

    #[test]
    fn header_and_order() {
        let mut buf = Vec::new();
        write_to(&store(), &mut buf).unwrap();
        assert!(buf.starts_with(b"ODEFMT1\na.gain f64 1 1\n"));
        let second = b"b.w f64 2 2 3\n";
        let at = "ODEFMT1\n".len() + "a.gain f64 1 1\n".len() + 8;
        assert_eq!(&buf[at..at + second.len()], second);
        assert_eq!(buf.len(), at + second.len() + 6 * 8);
    }

    #[test]
    fn f32_file_loads_as_f64() {
        let mut buf = Vec::new();
        write_to(&store().cast::<f32>(), &mut buf).unwrap();
        let back: ParamStore<f64> = read_from(&buf[..]).unwrap();
        assert_eq!(back.get("b.w").unwrap().data()[1], -2.5);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let mut buf = Vec::new();
        write_to(&store(), &mut buf).unwrap();
        assert!(read_from::<f64, _>(&buf[..buf.len() - 3]).is_err());
        assert!(read_from::<f64, _>(&b"ODEFMT2\n"[..]).is_err());
    }
}
