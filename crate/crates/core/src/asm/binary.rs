//! Binary image format, all integers little-endian:
//!
//! ```text
//! magic "ZIPI" | version u16 | reserved u16
//! code_base u64 | entry u64 | n_code u32 | n_code x u32 instruction words
//! data_base u64 | n_data u32 | n_data bytes
//! n_symbols u32 | { section u8 (0 text, 1 data) | addr u64 | len u16 | name }
//! n_functions u32 | { start u64 | end u64 | leaf u8 | frame u64 | len u16 | name }
//! ```

use std::collections::BTreeMap;
use thiserror::Error;

use super::{FunctionInfo, ProgramImage, Section, Symbol};
use crate::isa::{DecodeError, EncodeError, Instruction};

pub const IMAGE_MAGIC: &[u8; 4] = b"ZIPI";
pub const IMAGE_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageFormatError {
    #[error("not an image (bad magic)")]
    BadMagic,
    #[error("unsupported image version {0}")]
    UnsupportedVersion(u16),
    #[error("image truncated")]
    Truncated,
    #[error("trailing bytes after image")]
    TrailingBytes,
    #[error("symbol name is not UTF-8")]
    BadName,
    #[error("bad section tag {0}")]
    BadSection(u8),
    #[error("instruction {index}: {source}")]
    Decode { index: usize, source: DecodeError },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("{0} too large for the image format")]
    TooLarge(&'static str),
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<(), ImageFormatError> {
    let len = u16::try_from(name.len()).map_err(|_| ImageFormatError::TooLarge("symbol name"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn count(n: usize, what: &'static str) -> Result<[u8; 4], ImageFormatError> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| ImageFormatError::TooLarge(what))
}

pub fn encode_image(image: &ProgramImage) -> Result<Vec<u8>, ImageFormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&image.code_base.to_le_bytes());
    out.extend_from_slice(&image.entry.to_le_bytes());
    out.extend_from_slice(&count(image.code.len(), "code")?);
    for instr in &image.code {
        out.extend_from_slice(&instr.encode()?.to_le_bytes());
    }
    out.extend_from_slice(&image.data_base.to_le_bytes());
    out.extend_from_slice(&count(image.data.len(), "data")?);
    out.extend_from_slice(&image.data);
    out.extend_from_slice(&count(image.symbols.len(), "symbol table")?);
    for (name, sym) in &image.symbols {
        out.push(match sym.section {
            Section::Text => 0,
            Section::Data => 1,
        });
        out.extend_from_slice(&sym.addr.to_le_bytes());
        put_name(&mut out, name)?;
    }
    out.extend_from_slice(&count(image.functions.len(), "function table")?);
    for f in &image.functions {
        out.extend_from_slice(&f.start.to_le_bytes());
        out.extend_from_slice(&f.end.to_le_bytes());
        out.push(f.leaf as u8);
        out.extend_from_slice(&f.frame_bytes.to_le_bytes());
        put_name(&mut out, &f.name)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageFormatError> {
        if self.buf.len() < n {
            return Err(ImageFormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, ImageFormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ImageFormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ImageFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ImageFormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, ImageFormatError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| ImageFormatError::BadName)
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<ProgramImage, ImageFormatError> {
    let mut r = Reader { buf: bytes };
    if r.take(4).map_err(|_| ImageFormatError::BadMagic)? != IMAGE_MAGIC {
        return Err(ImageFormatError::BadMagic);
    }
    let version = r.u16()?;
    if version != IMAGE_VERSION {
        return Err(ImageFormatError::UnsupportedVersion(version));
    }
    r.u16()?;
    let code_base = r.u64()?;
    let entry = r.u64()?;
    let n_code = r.u32()? as usize;
    let mut code = Vec::with_capacity(n_code.min(1 << 20));
    for index in 0..n_code {
        let word = r.u32()?;
        code.push(Instruction::decode(word).map_err(|source| ImageFormatError::Decode { index, source })?);
    }
    let data_base = r.u64()?;
    let n_data = r.u32()? as usize;
    let data = r.take(n_data)?.to_vec();
    let n_sym = r.u32()?;
    let mut symbols = BTreeMap::new();
    for _ in 0..n_sym {
        let section = match r.u8()? {
            0 => Section::Text,
            1 => Section::Data,
            other => return Err(ImageFormatError::BadSection(other)),
        };
        let addr = r.u64()?;
        symbols.insert(r.name()?, Symbol { addr, section });
    }
    let n_fn = r.u32()?;
    let mut functions = Vec::new();
    for _ in 0..n_fn {
        let start = r.u64()?;
        let end = r.u64()?;
        let leaf = r.u8()? != 0;
        let frame_bytes = r.u64()?;
        functions.push(FunctionInfo { name: r.name()?, start, end, leaf, frame_bytes });
    }
    if !r.buf.is_empty() {
        return Err(ImageFormatError::TrailingBytes);
    }
    Ok(ProgramImage { code_base, code, data_base, data, symbols, entry, functions })
}
