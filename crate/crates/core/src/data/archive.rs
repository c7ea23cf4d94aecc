//! Single-bag binary archives.
//!
//! Layout: the 8-byte magic `ILBAG001`, a little-endian `u32` header length,
//! a JSON header, then every instance value as little-endian `f64` in
//! instance, channel, row, column order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Bag, Instance, InstanceShape};

pub const MAGIC: &[u8; 8] = b"ILBAG001";
pub const EXTENSION: &str = "bag";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    id: String,
    label: bool,
    shape: InstanceShape,
    count: usize,
    instance_labels: Option<Vec<bool>>,
}

pub fn write_bag(bag: &Bag, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        id: bag.id().to_string(),
        label: bag.label(),
        shape: bag.instance_shape(),
        count: bag.len(),
        instance_labels: bag.instance_labels().map(<[bool]>::to_vec),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(bag.len() * header.shape.len() * 8);
    for inst in bag.instances() {
        for v in inst.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn save_bag(bag: &Bag, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_bag(bag, &mut file).and_then(|_| file.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_bag(input: &mut impl Read, origin: &Path) -> Result<Bag> {
    let bad = |m: &str| Error::parse(origin, 1, m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("file too short for a bag archive"))?;
    if &magic != MAGIC {
        return Err(bad("not a bag archive (bad magic)"));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&format!("bad header: {e}")))?;
    let n = header.shape.len();
    let mut raw = vec![0u8; header.count * n * 8];
    input.read_exact(&mut raw).map_err(|_| bad("truncated instance data"))?;
    let mut instances = Vec::with_capacity(header.count);
    for chunk in raw.chunks_exact(n * 8) {
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        instances.push(Instance::from_vec(header.shape, values)?);
    }
    Bag::new(header.id, instances, header.label, header.instance_labels)
}

pub fn load_bag(path: &Path) -> Result<Bag> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    read_bag(&mut file, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let shape = InstanceShape::new(2, 3, 2);
        let inst = |s: f64| Instance::from_vec(shape, (0..12).map(|i| s + i as f64 / 7.0).collect()).unwrap();
        let bag = Bag::new("b-1", vec![inst(0.1), inst(-3.3)], true, Some(vec![false, true])).unwrap();
        let mut buf = Vec::new();
        write_bag(&bag, &mut buf).unwrap();
        let back = read_bag(&mut &buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, bag);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_bag(&mut &b"nonsense-bytes"[..], Path::new("mem")).is_err());
    }
}
