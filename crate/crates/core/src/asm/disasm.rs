use std::collections::BTreeMap;
use std::fmt::Write;

use super::{ProgramImage, Section};
use crate::isa::INSTR_BYTES;

/// Renders an image as assembly that [`assemble`](super::assemble) maps back
/// to the same image.
///
/// Functions come out as raw `.proc` regions (already expanded), so
/// reassembly does not instrument them a second time. Data is emitted as
/// `.byte` runs split at labels.
pub fn disassemble(image: &ProgramImage) -> String {
    let mut out = String::new();
    let fn_names: Vec<&str> = image.functions.iter().map(|f| f.name.as_str()).collect();

    let mut text_labels: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    let mut data_labels: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for (name, sym) in &image.symbols {
        if sym.section == Section::Text && fn_names.contains(&name.as_str()) {
            continue;
        }
        match sym.section {
            Section::Text => text_labels.entry(sym.addr).or_default().push(name),
            Section::Data => data_labels.entry(sym.addr).or_default().push(name),
        }
    }
    let label = |addr: u64| image.code_label(addr).map(str::to_string);
    let entry_name = image
        .symbols
        .iter()
        .find(|(_, s)| s.section == Section::Text && s.addr == image.entry)
        .map(|(n, _)| n.clone())
        .unwrap_or_else(|| format!("{:#x}", image.entry));

    writeln!(out, ".entry {entry_name}").unwrap();
    writeln!(out, ".text").unwrap();
    let emit_labels = |out: &mut String, labels: &BTreeMap<u64, Vec<&str>>, addr: u64| {
        if let Some(names) = labels.get(&addr) {
            for n in names {
                writeln!(out, "{n}:").unwrap();
            }
        }
    };
    for (idx, instr) in image.code.iter().enumerate() {
        let pc = image.code_base + idx as u64 * INSTR_BYTES;
        for f in image.functions.iter().filter(|f| f.end == pc && f.start < pc) {
            writeln!(out, ".endproc ; {}", f.name).unwrap();
        }
        for f in image.functions.iter().filter(|f| f.start == pc) {
            let kind = if f.leaf { "leaf" } else { "nonleaf" };
            writeln!(out, ".proc {} {kind} {}", f.name, f.frame_bytes).unwrap();
        }
        emit_labels(&mut out, &text_labels, pc);
        writeln!(out, "    {}", instr.format_at(pc, &label)).unwrap();
    }
    let end = image.code_end();
    for f in image.functions.iter().filter(|f| f.end == end && f.start < end) {
        writeln!(out, ".endproc ; {}", f.name).unwrap();
    }
    emit_labels(&mut out, &text_labels, end);

    writeln!(out, ".data").unwrap();
    let mut cuts: Vec<u64> = data_labels.keys().copied().filter(|a| *a < image.data_end()).collect();
    cuts.push(image.data_end());
    let mut pos = image.data_base;
    for cut in cuts {
        if cut > pos {
            write_bytes(&mut out, &image.data[(pos - image.data_base) as usize..(cut - image.data_base) as usize]);
            pos = cut;
        }
        emit_labels(&mut out, &data_labels, cut);
    }
    for (addr, _) in data_labels.range(image.data_end() + 1..) {
        emit_labels(&mut out, &data_labels, *addr);
    }
    out
}

fn write_bytes(out: &mut String, bytes: &[u8]) {
    for chunk in bytes.chunks(16) {
        let items: Vec<String> = chunk.iter().map(|b| format!("{b:#04x}")).collect();
        writeln!(out, "    .byte {}", items.join(", ")).unwrap();
    }
}
