//! Reference external classifier: serves `argmax(W x + b)` over the JSON-lines
//! protocol on stdin/stdout.
//!
//! ```text
//! smoothcert-linear-server --weights W.csmt [--bias b.csmt]
//! ```

use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use smoothcert::container::Tensor;
use smoothcert::extproto::serve;
use smoothcert::smoothing::LinearClassifier;

#[derive(Parser)]
#[command(version, about = "Serve a linear classifier over the external protocol")]
struct Args {
    /// `K x D` weight matrix container.
    #[arg(long)]
    weights: PathBuf,
    /// Length-`K` bias container; zeros when omitted.
    #[arg(long)]
    bias: Option<PathBuf>,
}

fn load(args: &Args) -> Result<LinearClassifier, String> {
    let w = Tensor::read(&args.weights).map_err(|e| e.to_string())?;
    let &[k, d] = w.dims() else {
        return Err(format!("{}: weights must be a K x D matrix", args.weights.display()));
    };
    let bias = match &args.bias {
        Some(path) => {
            let b = Tensor::read(path).map_err(|e| e.to_string())?;
            b.expect_dims(&[k], "bias").map_err(|e| e.to_string())?;
            b.to_f64()
        }
        None => vec![0.0; k as usize],
    };
    LinearClassifier::new(w.to_f64(), bias, d as usize).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let model = match load(&args) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("event=fatal error={e:?}");
            return ExitCode::from(2);
        }
    };
    let num_classes = model.bias.len() as u32;
    let stdin = io::stdin().lock();
    let stdout = BufWriter::new(io::stdout().lock());
    let result = serve(stdin, stdout, num_classes, |data, rows, cols| {
        if cols != model.input_dim {
            return Err(format!("rows have {cols} values, model expects {}", model.input_dim));
        }
        let mut x = vec![0.0f64; cols];
        Ok((0..rows)
            .map(|r| {
                for (xi, v) in x.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                    *xi = f64::from(*v);
                }
                model.classify(&x) as u32
            })
            .collect())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("event=fatal error={e:?}");
            ExitCode::from(2)
        }
    }
}
