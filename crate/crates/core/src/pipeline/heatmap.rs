//! Token heatmaps. Intensity runs from white (score 0) to dark red (score 1).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AttributionResult, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapFormat {
    #[default]
    Html,
    Ansi,
}

impl FromStr for HeatmapFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "html" => Ok(Self::Html),
            "ansi" => Ok(Self::Ansi),
            other => Err(format!("unknown heatmap format {other:?}")),
        }
    }
}

const DARK_RED: (f64, f64, f64) = (139.0, 0.0, 0.0);

/// xterm-256 background ramp, white through dark red.
const ANSI_RAMP: [u8; 9] = [231, 224, 217, 210, 203, 196, 160, 124, 88];

fn clamp_score(s: f64) -> f64 {
    if s.is_nan() {
        0.0
    } else {
        s.clamp(0.0, 1.0)
    }
}

pub(crate) fn html_color(score: f64) -> (u8, u8, u8) {
    let s = clamp_score(score);
    let mix = |target: f64| (255.0 + (target - 255.0) * s).round() as u8;
    (mix(DARK_RED.0), mix(DARK_RED.1), mix(DARK_RED.2))
}

pub(crate) fn ansi_bucket(score: f64) -> u8 {
    let idx = (clamp_score(score) * (ANSI_RAMP.len() - 1) as f64).round() as usize;
    ANSI_RAMP[idx]
}

fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn render_html(result: &AttributionResult) -> String {
    let mut body = String::new();
    for ((token, &score), &coef) in result
        .tokens
        .iter()
        .zip(&result.normalized_scores)
        .zip(&result.coefficients)
    {
        let (r, g, b) = html_color(score);
        let fg = if clamp_score(score) > 0.6 { "#ffffff" } else { "#000000" };
        let _ = writeln!(
            body,
            "<span class=\"tok\" style=\"background-color:rgb({r},{g},{b});color:{fg}\" \
             title=\"score {score:.4} (coefficient {coef:.6})\">{}</span>",
            escape_html(token)
        );
    }
    let title = escape_html(&result.tokens.join(" "));
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>Attribution: {title}</title>\n<style>\n\
         body {{ font-family: sans-serif; margin: 2em; }}\n\
         .tok {{ display: inline-block; padding: 0.2em 0.4em; margin: 0.1em; border-radius: 4px; border: 1px solid #ddd; }}\n\
         </style>\n</head>\n<body>\n<p>\n{body}</p>\n</body>\n</html>\n"
    )
}

fn render_ansi(result: &AttributionResult) -> String {
    let mut line = String::new();
    for (token, &score) in result.tokens.iter().zip(&result.normalized_scores) {
        let bg = ansi_bucket(score);
        let fg = if clamp_score(score) > 0.6 { 15 } else { 16 };
        let _ = write!(line, "\x1b[48;5;{bg}m\x1b[38;5;{fg}m {token} \x1b[0m");
    }
    line.push('\n');
    line
}

pub fn render_heatmap(result: &AttributionResult, format: HeatmapFormat) -> String {
    match format {
        HeatmapFormat::Html => render_html(result),
        HeatmapFormat::Ansi => render_ansi(result),
    }
}

pub fn write_heatmap(
    result: &AttributionResult,
    format: HeatmapFormat,
    out: impl AsRef<Path>,
) -> Result<(), PipelineError> {
    let out = out.as_ref();
    fs::write(out, render_heatmap(result, format)).map_err(|e| PipelineError::FileWrite {
        path: out.display().to_string(),
        message: e.to_string(),
    })
}
