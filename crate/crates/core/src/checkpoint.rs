//! Bit-exact checkpoint container.
//!
//! Layout: magic "LLSF", format version u32, entry count u32, then per
//! entry: name length u16 + UTF-8 name, rank u8, dims u32 each, dtype tag
//! u8 (0 = f32, 1 = f64), little-endian raw values. Everything the trainer
//! needs — parameters, optimizer moments, the flow layout, counters — is
//! stored as named entries; reserved names start with `__`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::flow::FlowLayout;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const MAGIC: [u8; 4] = *b"LLSF";
pub const FORMAT_VERSION: u32 = 1;

/// Name of the layout manifest entry: [levels, steps_per_level,
/// base_channels, hr_h, hr_w] as f64.
pub const LAYOUT_ENTRY: &str = "__meta/layout";

/// A dtype-erased stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Entry::F32(t) => t.cast::<T>(),
            Entry::F64(t) => t.cast::<T>(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE_TAG {
            0 => Entry::F32(t.cast::<f32>()),
            _ => Entry::F64(t.cast::<f64>()),
        }
    }
}

/// An ordered, named collection of tensors. Ordering is lexicographic by
/// name, which makes serialization canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.entries.insert(name.to_string(), Entry::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| TensorError::Invalid {
            ctx: "Checkpoint::get",
            msg: format!("missing entry {name}"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Scalar convenience accessor (entry must have exactly one element).
    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t: Tensor<f64> = self.get(name)?.to_tensor();
        t.item()
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, &Tensor::scalar(v));
    }

    pub fn set_layout(&mut self, layout: &FlowLayout) {
        let t = Tensor::<f64>::new_unchecked(
            vec![5],
            vec![
                layout.levels as f64,
                layout.steps_per_level as f64,
                layout.base_channels as f64,
                layout.hr_size.0 as f64,
                layout.hr_size.1 as f64,
            ],
        );
        self.insert(LAYOUT_ENTRY, &t);
    }

    pub fn layout(&self) -> Result<FlowLayout> {
        let t: Tensor<f64> = self.get(LAYOUT_ENTRY)?.to_tensor();
        let d = t.data();
        if d.len() != 5 {
            return Err(TensorError::Invalid {
                ctx: "Checkpoint::layout",
                msg: format!("layout entry has {} values, expected 5", d.len()),
            });
        }
        FlowLayout::new(
            d[0] as usize,
            d[1] as usize,
            d[2] as usize,
            (d[3] as usize, d[4] as usize),
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| TensorError::Invalid {
            ctx: "Checkpoint::write",
            msg: e.to_string(),
        };
        w.write_all(&MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, entry) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(TensorError::Invalid {
                    ctx: "Checkpoint::write",
                    msg: format!("name too long: {name}"),
                });
            }
            w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            let shape = entry.shape();
            w.write_all(&[shape.len() as u8]).map_err(io)?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            match entry {
                Entry::F32(t) => {
                    w.write_all(&[0u8]).map_err(io)?;
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes()).map_err(io)?;
                    }
                }
                Entry::F64(t) => {
                    w.write_all(&[1u8]).map_err(io)?;
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes()).map_err(io)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| TensorError::Invalid {
            ctx: "Checkpoint::read",
            msg: e.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != MAGIC {
            return Err(TensorError::Invalid {
                ctx: "Checkpoint::read",
                msg: format!("bad magic {magic:?}"),
            });
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(io)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(TensorError::Invalid {
                ctx: "Checkpoint::read",
                msg: format!("unsupported format version {version}"),
            });
        }
        r.read_exact(&mut u32b).map_err(io)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b).map_err(io)?;
            let nlen = u16::from_le_bytes(u16b) as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb).map_err(io)?;
            let name = String::from_utf8(nb).map_err(|e| TensorError::Invalid {
                ctx: "Checkpoint::read",
                msg: format!("bad name: {e}"),
            })?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(io)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut u32b).map_err(io)?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(io)?;
            let entry = match tag[0] {
                0 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut b = [0u8; 4];
                    for _ in 0..numel {
                        r.read_exact(&mut b).map_err(io)?;
                        data.push(f32::from_le_bytes(b));
                    }
                    Entry::F32(Tensor::new_unchecked(shape, data))
                }
                1 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut b = [0u8; 8];
                    for _ in 0..numel {
                        r.read_exact(&mut b).map_err(io)?;
                        data.push(f64::from_le_bytes(b));
                    }
                    Entry::F64(Tensor::new_unchecked(shape, data))
                }
                t => {
                    return Err(TensorError::Invalid {
                        ctx: "Checkpoint::read",
                        msg: format!("unknown dtype tag {t}"),
                    })
                }
            };
            entries.insert(name, entry);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| TensorError::Invalid {
            ctx: "Checkpoint::save",
            msg: format!("{}: {e}", path.display()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| TensorError::Invalid {
            ctx: "Checkpoint::load",
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::read_from(&mut buf.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.insert(
            "a/w",
            &Tensor::<f64>::from_fn(vec![2, 3], |i| (i as f64).sqrt() * 1.0e-7 + 0.1),
        );
        ck.insert("b", &Tensor::<f32>::from_fn(vec![4], |i| i as f64 as f32 * 0.25));
        ck.set_scalar("__opt/step", 17.0);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        // serialize again: byte-identical (canonical ordering)
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn header_is_as_documented() {
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::<f32>::from_fn(vec![2], |i| i as f32));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"LLSF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 1);
        assert_eq!(buf[14], b'x');
        assert_eq!(buf[15], 1); // rank
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(buf[20], 0); // f32 tag
        assert_eq!(buf.len(), 21 + 8);
    }

    #[test]
    fn layout_roundtrip() {
        let mut ck = Checkpoint::new();
        let layout = FlowLayout::standard(3, (32, 32)).unwrap();
        ck.set_layout(&layout);
        assert_eq!(ck.layout().unwrap(), layout);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
