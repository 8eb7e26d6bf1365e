use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use irnn_core::fixedpoint::format_table;
use irnn_core::model::{toy_model, toy_sequences, FloatModel, IrnnModel, ToySpec};
use irnn_core::model_io::{self, read_calibration, write_csv, write_raw_f32};
use irnn_core::quant::derive_params;
use irnn_core::rnn::{activation_table, CellConfig};

use crate::report::{default_tolerance, layer_stats, CliError, CliResult, ModelBytes, RunReport};
use crate::{ApproxArgs, CompareArgs, DataArgs, InitArgs, QuantizeArgs, RunArgs, TableArgs};

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn csv_error(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => CliError::Io(format!("{other:?}")),
    }
}

fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_inputs(path: &Path) -> CliResult<Vec<Vec<Vec<f64>>>> {
    read_calibration(path).map_err(|e| match e {
        irnn_core::Error::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
        other => other.into(),
    })
}

fn load_float(path: &Path) -> CliResult<FloatModel> {
    model_io::load_float_file(path).map_err(|e| match e {
        irnn_core::Error::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
        other => other.into(),
    })
}

fn load_int(path: &Path) -> CliResult<IrnnModel> {
    model_io::load_file(path).map_err(|e| match e {
        irnn_core::Error::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
        other => other.into(),
    })
}

pub fn init(a: &InitArgs, seed: u64) -> CliResult<()> {
    let spec = ToySpec {
        input_size: a.input_size,
        hidden_size: a.hidden,
        layers: a.layers,
        bidirectional: a.bidirectional,
        layernorm: a.layernorm,
        attention: a.attention,
    };
    let model = toy_model(spec, seed)?;
    if has_ext(&a.out, "irnn") {
        model_io::save_float_file(&model, &a.out)?;
    } else {
        let text = serde_json::to_vec_pretty(&model).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(&a.out, text)?;
    }
    info!("wrote {} parameters to {}", model.param_count(), a.out.display());
    Ok(())
}

pub fn data(a: &DataArgs, seed: u64) -> CliResult<()> {
    if a.count == 0 || a.len == 0 || a.width == 0 {
        return Err(CliError::Usage("count, len and width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = toy_sequences(&mut rng, a.count, a.len, a.width);
    if has_ext(&a.out, "csv") {
        write_csv(BufWriter::new(File::create(&a.out)?), &seqs)?;
    } else {
        std::fs::write(&a.out, write_raw_f32(&seqs)?)?;
    }
    Ok(())
}

pub fn quantize(a: &QuantizeArgs) -> CliResult<()> {
    let mut float = load_float(&a.model)?;
    if a.madnorm {
        float = float.with_madnorm()?;
    }
    let calib = read_inputs(&a.calib)?;
    let cfg = CellConfig {
        cell_bits: a.cell_bits,
        preact_bits: a.preact_bits.unwrap_or(a.cell_bits),
        use_madnorm: float.uses_norm(),
        pwl_pieces: a.pwl_pieces,
    };
    let model = IrnnModel::calibrate(&float, cfg, &calib)?;
    let bytes = model_io::save(&model)?;
    std::fs::write(&a.out, &bytes)?;
    info!("calibrated on {} sequences, wrote {} bytes", calib.len(), bytes.len());
    Ok(())
}

pub fn approx(a: &ApproxArgs) -> CliResult<()> {
    let (lo, hi) = match a.range.as_deref() {
        Some([lo, hi]) => (*lo, *hi),
        Some(_) => return Err(CliError::Usage("--range takes two values".into())),
        None => a.func.input_range(),
    };
    let f = a.func;
    let p_in = derive_params(lo, hi, a.bits)?;
    let table = activation_table(f.name(), move |x| f.eval(x), p_in, a.pieces)?;
    let p_out = *table.out_params();
    let knots = table.q_knots();
    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    w.write_record(["x", "q", "f", "g", "g_int", "abs_err", "knot"]).map_err(csv_error)?;
    let mut max_err = 0.0f64;
    for q in 0..=p_in.qmax() {
        let x = p_in.dequantize(q);
        let (fx, gx) = (f.eval(x), table.eval_float(x));
        let gi = p_out.dequantize(table.eval_int(q));
        max_err = max_err.max((fx - gx).abs());
        let knot = u8::from(knots.binary_search(&q).is_ok());
        w.write_record([
            x.to_string(),
            q.to_string(),
            fx.to_string(),
            gx.to_string(),
            gi.to_string(),
            (fx - gx).abs().to_string(),
            knot.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    info!("{}: {} pieces, max grid error {max_err:.3e}", f.name(), table.pieces());
    Ok(())
}

fn write_outputs(path: Option<&Path>, outs: &[Vec<Vec<f64>>]) -> CliResult<()> {
    let width = outs.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let mut w = csv::Writer::from_writer(sink(path)?);
    let mut header = vec!["seq".to_string()];
    header.extend((0..width).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(csv_error)?;
    for (s, seq) in outs.iter().enumerate() {
        for row in seq {
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(a: &RunArgs) -> CliResult<()> {
    let model = load_int(&a.model)?;
    if a.attend && model.decoder.is_none() {
        return Err(CliError::Usage("--attend needs a model with an attending decoder".into()));
    }
    let inputs = read_inputs(&a.input)?;
    let mut outs = Vec::with_capacity(inputs.len());
    for xs in &inputs {
        let q = model.quantize_input(xs)?;
        let y = if a.attend { model.run(&q)? } else { model.encode(&q)? };
        let width = y.shape()[1];
        outs.push(y.dequantize().chunks(width).map(<[f64]>::to_vec).collect());
    }
    write_outputs(a.out.as_deref(), &outs)
}

pub fn compare(a: &CompareArgs) -> CliResult<()> {
    let model = load_int(&a.model)?;
    let export = model.export_float()?;
    let float = match &a.float {
        Some(p) => load_float(p)?,
        None => export.clone(),
    };
    let inputs = read_inputs(&a.input)?;
    let runs = inputs
        .iter()
        .map(|xs| model.compare(&float, xs))
        .collect::<irnn_core::Result<Vec<_>>>()?;
    let mut layers = layer_stats(&runs);
    for l in &mut layers {
        l.tolerance = Some(a.tolerance.unwrap_or_else(|| default_tolerance(&l.name)));
    }
    let report = RunReport {
        layers,
        timings: None,
        model_bytes: ModelBytes::new(model_io::save(&model)?.len(), model_io::save_float(&export)?.len()),
    };
    let mut out = sink(a.report.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    let over: Vec<String> = report
        .layers
        .iter()
        .filter_map(|l| {
            let tol = l.tolerance?;
            (l.max_abs_error > tol).then(|| format!("{} max {:.4} > {tol}", l.name, l.max_abs_error))
        })
        .collect();
    if over.is_empty() {
        Ok(())
    } else {
        Err(CliError::Tolerance(over.join(", ")))
    }
}

pub fn table(a: &TableArgs) -> CliResult<()> {
    if a.bits == 0 || a.bits > 32 {
        return Err(CliError::Usage(format!("--bits {} is outside 1..=32", a.bits)));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "scaling | precision | signed range | unsigned range")?;
    for row in format_table(a.bits) {
        writeln!(out, "{}", row.render())?;
    }
    Ok(())
}
