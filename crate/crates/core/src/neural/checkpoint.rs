//! Network checkpoints: a magic tag, a JSON header describing the
//! architecture, then the raw parameter vector as little-endian `f64`.
//! Loading validates the magic, the header, the parameter count, and the
//! exact file length, so a corrupt or mismatched file fails loudly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::net::{Network, NetworkSpec};

const MAGIC: &[u8; 8] = b"PLNET01\n";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    theta_len: usize,
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let header = Header {
        spec: net.spec().clone(),
        theta_len: net.theta.len(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for v in &net.theta {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a network checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    read_exact(&mut r, &mut len_bytes, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    read_exact(&mut r, &mut header_json, "header")?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut net = Network::zeros(header.spec)?;
    if net.num_params() != header.theta_len {
        return Err(Error::Format(format!(
            "header claims {} parameters but the architecture has {}",
            header.theta_len,
            net.num_params()
        )));
    }
    let mut buf = [0u8; 8];
    for v in net.theta.iter_mut() {
        read_exact(&mut r, &mut buf, "parameters")?;
        *v = f64::from_le_bytes(buf);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok(net),
        _ => Err(Error::Format("trailing bytes after parameters".into())),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::net::{LayerSpec, NetworkSpec};
    use crate::rng::RngState;

    fn sample_net() -> Network {
        let spec = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 3 },
            ],
        };
        Network::new(spec, &mut RngState::new(77)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(net.theta, loaded.theta);
        assert_eq!(net.spec(), loaded.spec());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTANET\n plus junk").unwrap();
        assert!(matches!(load_network(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let net = sample_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_network(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_network(&path), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let net = sample_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_network(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_network(&path), Err(Error::Format(_))));
    }

    #[test]
    fn header_parameter_mismatch_is_detected() {
        let net = sample_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_network(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Rewrite the header with a wrong theta_len but keep the blob.
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        header["theta_len"] = serde_json::json!(1);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[12 + header_len..]);
        std::fs::write(&path, &out).unwrap();
        assert!(matches!(load_network(&path), Err(Error::Format(_))));
    }
}
