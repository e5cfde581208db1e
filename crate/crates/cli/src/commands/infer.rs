use std::path::{Path, PathBuf};

use cs2net::data::{read_input, write_input, write_label};
use cs2net::metrics::{mip_png, write_gray_png};
use cs2net::model::load_checkpoint;
use cs2net::tensor::Tensor;
use cs2net::train::infer;

use super::{data_files, key_with_suffix};
use crate::config::parse_extent;
use crate::Failure;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input `.pgm` image, `.vol` volume, or a directory of them (only the
    /// `*_input` files when the directory has any).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Tile larger inputs with this window (e.g. `64x64x64`), 50% overlap.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<::std::vec::Vec<usize>>,
    /// Write attention matrices as PGM heatmaps (first rows of each map).
    #[arg(long)]
    pub dump_attention: bool,
    /// Rows kept per attention heatmap.
    #[arg(long, default_value_t = 256, requires = "dump_attention")]
    pub attention_rows: usize,
}

fn parse_window(s: &str) -> Result<Vec<usize>, String> {
    parse_extent(s).ok_or_else(|| format!("expected AxB or AxBxC, got `{s}`"))
}

/// Output key of an input file: its stem without an `_input` suffix.
fn key_of(path: &Path) -> String {
    key_with_suffix(path, "_input")
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

/// Writes `{key}_prob` and `{key}_mask` per input, `{key}_mip.png` for
/// volumes and `{key}_attn{i}_{label}.pgm` with `--dump-attention`.
pub fn run(args: &Args) -> Result<(), Failure> {
    let mut model = load_checkpoint(&args.ckpt)?.model;
    let inputs = if args.input.is_dir() {
        let all = data_files(&args.input)?;
        // A synthesized dataset directory also holds masks; take only inputs.
        let tagged: Vec<PathBuf> = all.iter().filter(|p| key_with_suffix(p, "_input").is_some()).cloned().collect();
        if tagged.is_empty() { all } else { tagged }
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Failure::usage(format!("no .pgm or .vol files in {}", args.input.display())));
    }
    std::fs::create_dir_all(&args.out)?;
    for path in &inputs {
        let key = key_of(path);
        let x = read_input(path)?;
        let out = infer(&mut model, &x, args.window.as_deref())?;
        write_input(&args.out, &format!("{key}_prob"), &out.prob)?;
        write_label(&args.out, &format!("{key}_mask"), &out.mask)?;
        if out.prob.dims().len() == 4 {
            let (h, w, px) = mip_png(&out.prob)?;
            write_gray_png(&args.out.join(format!("{key}_mip.png")), h, w, &px)?;
        }
        if args.dump_attention {
            dump_attention(&mut model, &x, args, &key)?;
        }
        println!("{} -> {key}", path.display());
    }
    Ok(())
}

fn dump_attention(model: &mut cs2net::model::Model<f32>, x: &Tensor<f32>, args: &Args, key: &str) -> Result<(), Failure> {
    let mut batch = vec![1];
    batch.extend(x.dims());
    let (_, capture) = model.predict_with_capture(&x.clone().reshape(batch)?, Some(args.attention_rows))?;
    let maps = capture.map(|c| c.into_maps()).unwrap_or_default();
    if maps.is_empty() {
        log::warn!("model has no attention blocks; nothing to dump");
    }
    for (i, m) in maps.iter().enumerate() {
        let label: String = m.label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        m.save_pgm(&args.out.join(format!("{key}_attn{i}_{label}.pgm")))?;
    }
    Ok(())
}
