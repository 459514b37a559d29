//! Text checkpoint for trained models.
//!
//! ```text
//! d1,d2,H,C_max,version
//! 16,100,8,2,1
//! [variant]
//! full
//! [train_tasks]
//! task00
//! [token_table 57 16]
//! <one comma-separated row per line>
//! [theta_agn 1 273]
//! [generator 273 100]
//! [generator_bias 1 273]      (only when enabled)
//! [theta_second 1 <len>]      (replacement variant only)
//! ```
//!
//! Values use 17 significant digits, so a write/read cycle is bit-exact.
//! Relation-network blocks follow the flat layout `W1` row-major, `b1`, `w2`,
//! `b2`; that layout is what `version` pins.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoding::EncoderParams;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Variant};
use crate::numerics::Matrix;
use crate::relation::{GeneratorParams, RelationNetParams};

pub const FORMAT_VERSION: u32 = 1;
const HEADER: &str = "d1,d2,H,C_max,version";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    /// KB embedding width the model was trained against.
    pub knowledge_dim: usize,
    /// Largest episode class count seen in training.
    pub max_classes: usize,
    pub train_tasks: Vec<String>,
}

fn write_block(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let _ = writeln!(out, "[{name} {rows} {cols}]");
    for row in data.chunks(cols.max(1)) {
        let values: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", values.join(","));
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = format!("{HEADER}\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.sentence_dim(),
            self.knowledge_dim,
            m.agnostic.hidden(),
            self.max_classes,
            FORMAT_VERSION
        );
        let _ = writeln!(out, "[variant]\n{}", m.variant);
        out.push_str("[train_tasks]\n");
        for t in &self.train_tasks {
            let _ = writeln!(out, "{t}");
        }
        let table = &m.encoder.table;
        write_block(&mut out, "token_table", table.rows(), table.cols(), table.as_slice());
        write_block(&mut out, "theta_agn", 1, m.agnostic.len(), m.agnostic.flat());
        if let Some(g) = &m.generator {
            write_block(&mut out, "generator", g.matrix.rows(), g.matrix.cols(), g.matrix.as_slice());
            if let Some(b) = &g.bias {
                write_block(&mut out, "generator_bias", 1, b.len(), b);
            }
        }
        if let Some(s) = &m.second {
            write_block(&mut out, "theta_second", 1, s.len(), s.flat());
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&HEADER) {
            return Err(Error::parse(origin, 1, format!("expected header `{HEADER}`")));
        }
        let dims: Vec<usize> = lines
            .get(1)
            .ok_or_else(|| Error::parse(origin, 2, "missing dimensions line"))?
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(origin, 2, format!("bad dimensions: {e}")))?;
        let [d1, d2, hidden, max_classes, version] = dims[..] else {
            return Err(Error::parse(origin, 2, "expected 5 comma-separated integers"));
        };
        if version != FORMAT_VERSION as usize {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})",
                origin.display()
            )));
        }

        let mut variant = None;
        let mut train_tasks = Vec::new();
        let mut blocks: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        let mut section = String::new();
        for (i, line) in lines.iter().enumerate().skip(2) {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(head) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let parts: Vec<&str> = head.split_whitespace().collect();
                section = parts.first().copied().unwrap_or_default().to_owned();
                if parts.len() == 3 {
                    let rows = parts[1].parse().map_err(|_| Error::parse(origin, line_no, "bad row count"))?;
                    let cols = parts[2].parse().map_err(|_| Error::parse(origin, line_no, "bad column count"))?;
                    blocks.push((section.clone(), rows, cols, Vec::new()));
                } else if parts.len() != 1 {
                    return Err(Error::parse(origin, line_no, format!("bad section header `{line}`")));
                }
                continue;
            }
            match section.as_str() {
                "variant" => variant = Some(line.trim().parse::<Variant>()?),
                "train_tasks" => train_tasks.push(line.trim().to_owned()),
                "" => return Err(Error::parse(origin, line_no, "data before first section")),
                _ => {
                    let block = blocks
                        .last_mut()
                        .ok_or_else(|| Error::parse(origin, line_no, "values outside a block"))?;
                    for v in line.split(',') {
                        let v: f64 = v
                            .trim()
                            .parse()
                            .map_err(|e| Error::parse(origin, line_no, format!("bad number: {e}")))?;
                        block.3.push(v);
                    }
                }
            }
        }
        let variant = variant.ok_or_else(|| Error::parse(origin, 3, "missing [variant] section"))?;

        let mut take = |name: &str| -> Result<Option<(usize, usize, Vec<f64>)>> {
            match blocks.iter().position(|b| b.0 == name) {
                None => Ok(None),
                Some(i) => {
                    let (_, rows, cols, data) = blocks.remove(i);
                    if data.len() != rows * cols {
                        return Err(Error::Data(format!(
                            "{}: block `{name}` declares {rows}x{cols} but holds {} values",
                            origin.display(),
                            data.len()
                        )));
                    }
                    Ok(Some((rows, cols, data)))
                }
            }
        };
        let missing = |name: &str| Error::Data(format!("{}: missing block `{name}`", origin.display()));

        let (v, cols, table) = take("token_table")?.ok_or_else(|| missing("token_table"))?;
        if cols != d1 {
            return Err(Error::dim("token_table columns", d1, cols));
        }
        let encoder = EncoderParams {
            table: Matrix::from_vec(v, d1, table)?,
        };
        let input = 2 * d1;
        let (_, _, agn) = take("theta_agn")?.ok_or_else(|| missing("theta_agn"))?;
        let agnostic = RelationNetParams::from_flat(input, hidden, agn)?;
        let generator = match take("generator")? {
            None => None,
            Some((rows, cols, data)) => {
                if cols != d2 {
                    return Err(Error::dim("generator columns", d2, cols));
                }
                let bias = take("generator_bias")?.map(|(_, _, b)| b);
                let gen = GeneratorParams {
                    input,
                    hidden,
                    matrix: Matrix::from_vec(rows, cols, data)?,
                    bias,
                };
                if gen.output_dim() != agnostic.len() || gen.bias.as_ref().is_some_and(|b| b.len() != agnostic.len()) {
                    return Err(Error::dim("generator rows", agnostic.len(), gen.output_dim()));
                }
                Some(gen)
            }
        };
        let second = match take("theta_second")? {
            None => None,
            Some((_, _, data)) => {
                // len = input·H' + 2·H' + 1
                let h = (data.len().saturating_sub(1)) / (input + 2);
                Some(RelationNetParams::from_flat(input, h, data)?)
            }
        };
        let expected = match variant {
            Variant::Full => generator.is_some() && second.is_none(),
            Variant::Ablation => generator.is_none() && second.is_none(),
            Variant::Replacement => generator.is_none() && second.is_some(),
        };
        if !expected {
            return Err(Error::Data(format!(
                "{}: blocks do not match variant `{variant}`",
                origin.display()
            )));
        }
        Ok(Checkpoint {
            model: ModelParams {
                variant,
                encoder,
                agnostic,
                generator,
                second,
            },
            knowledge_dim: d2,
            max_classes,
            train_tasks,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
