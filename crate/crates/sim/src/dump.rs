//! Debug dumps: chip images around the re-layout unit, KV placement, PIM
//! command streams and predictor training windows.

use std::fmt::Write as _;
use std::io::Write;

use dimmpim_core::mapping::{placement_records, ChipSel, KvKind, KvPlacement};
use dimmpim_core::pim::stream::simulate_head;
use dimmpim_core::pim::PimModel;
use dimmpim_core::predictor::{PredictorState, Target};
use dimmpim_core::relayout::{BurstBeat, ChipImage};
use dimmpim_core::SimConfig;

/// Hex chip images of one burst before and after re-layout. The burst is
/// `beats` bus-wide beats of a deterministic ramp (byte `i` = `i`).
pub fn relayout_dump(bus_bits: u32, chip_io_bits: u32, elem_bits: u32, beats: u32) -> Result<String, dimmpim_core::Error> {
    let bytes_per_beat = (bus_bits / 8) as usize;
    let input: Vec<BurstBeat> = (0..beats)
        .map(|k| {
            let b: Vec<u8> = (0..bytes_per_beat).map(|i| (k as usize * bytes_per_beat + i) as u8).collect();
            BurstBeat::from_bytes(bus_bits, k, &b)
        })
        .collect();
    let before = ChipImage::conventional(&input, chip_io_bits, elem_bits);
    let after = ChipImage::relayouted(&input, chip_io_bits, elem_bits).map_err(dimmpim_core::Error::from)?;
    let mut out = String::new();
    for (name, img) in [("conventional", &before), ("relayouted", &after)] {
        let _ = writeln!(out, "# {name} ({} chips x{}, {}-bit elements)", img.chip_count, img.chip_io_bits, elem_bits);
        for c in 0..img.chip_count as usize {
            let hex: String = img.chip_bytes(c).iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "chip{c:02}: {hex}");
        }
    }
    Ok(out)
}

/// CSV of every K/V span of `requests` requests with `tokens` tokens each.
pub fn placement_dump(
    cfg: &SimConfig,
    requests: u64,
    tokens: u64,
    w: impl Write,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut p = KvPlacement::new(&cfg.topology, &cfg.model, cfg.pim.v_spread)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["request", "layer", "head", "token", "kind", "segment", "rankset", "channel", "chip", "bank", "row", "col", "bursts"])?;
    for r in 0..requests {
        p.admit(r, tokens)?;
        p.append_tokens(r, tokens)?;
        for rec in placement_records(&p, r)? {
            let a = rec.span.addr;
            let chip = match a.chip {
                ChipSel::All => "all".to_string(),
                ChipSel::One(c) => c.to_string(),
            };
            let kind = match rec.kind {
                KvKind::K => "K",
                KvKind::V => "V",
            };
            csv.write_record([
                rec.request.to_string(),
                rec.layer.to_string(),
                rec.head.to_string(),
                rec.token.to_string(),
                kind.into(),
                rec.segment.to_string(),
                a.rankset.to_string(),
                a.channel.to_string(),
                chip,
                a.bank.to_string(),
                a.row.to_string(),
                a.col_offset.to_string(),
                rec.span.bursts.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// DDR command stream of one head kernel over `tokens` tokens. Every command
/// is all-bank, so the bank column reads `all`.
pub fn pim_trace(cfg: &SimConfig, tokens: u64, w: impl Write) -> Result<(), Box<dyn std::error::Error>> {
    let p = PimModel::from_config(cfg)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["cycle", "cmd", "bank", "row", "col"])?;
    for c in simulate_head(&p, tokens).commands {
        csv.write_record([c.cycle.to_string(), c.cmd.as_str().into(), "all".into(), c.row.to_string(), c.col.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

/// CSV of a predictor's training windows: target, feature columns, observed ns.
pub fn predictor_window(p: &PredictorState, w: impl Write) -> Result<(), csv::Error> {
    let mut csv = csv::WriterBuilder::new().flexible(true).from_writer(w);
    csv.write_record(["target", "observed_ns", "features..."])?;
    for (name, t) in [("pim", Target::Pim), ("prefill", Target::Prefill), ("batch", Target::Batch)] {
        for (x, y) in p.samples(t).iter() {
            let mut row = vec![name.to_string(), y.to_string()];
            row.extend(x.iter().map(f64::to_string));
            csv.write_record(&row)?;
        }
    }
    csv.flush()?;
    Ok(())
}
