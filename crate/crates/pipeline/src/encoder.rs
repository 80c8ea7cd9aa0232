// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encoder selection, including a line-oriented JSON bridge to an
//! out-of-process image-text model.
//!
//! The external process reads one request per line on stdin and answers
//! one line on stdout:
//!
//! ```text
//! {"op":"id"}                          -> {"id":"clip-vit-b32@..."}
//! {"op":"texts","texts":["a","b"]}     -> {"embeddings":[[...],[...]]}
//! {"op":"images","images":["<png b64>"]} -> {"embeddings":[[...]]}
//! ```
//!
//! Any response carrying `"error"` fails the call.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use spatial_cbm::similarity::encoder::{ClientError, ColorPrototypeEncoder, EmbeddingClient, TextEncoder};
use spatial_cbm::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    ColorPrototype {
        #[serde(default = "default_context")]
        context_weight: f32,
        #[serde(default = "default_temperature")]
        temperature: f32,
    },
    External {
        /// Program followed by its arguments.
        command: Vec<String>,
    },
}

fn default_context() -> f32 {
    ColorPrototypeEncoder::default().context_weight
}

fn default_temperature() -> f32 {
    ColorPrototypeEncoder::default().temperature
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Box<dyn EmbeddingClient>> {
        match self {
            Self::ColorPrototype { context_weight, temperature } => {
                Ok(Box::new(ColorPrototypeEncoder { context_weight: *context_weight, temperature: *temperature }))
            }
            Self::External { command } => Ok(Box::new(ExternalEncoder::spawn(command)?)),
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request<'a> {
    Id,
    Texts { texts: &'a [String] },
    Images { images: Vec<String> },
}

#[derive(Deserialize)]
struct Response {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    embeddings: Option<Vec<Vec<f32>>>,
    #[serde(default)]
    error: Option<String>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalEncoder {
    pipe: Mutex<Pipe>,
    id: String,
}

impl std::fmt::Debug for ExternalEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEncoder").field("id", &self.id).finish()
    }
}

impl ExternalEncoder {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) =
            command.split_first().ok_or_else(|| Error::Config("external encoder command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Config(format!("cannot start encoder {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut enc = Self { pipe: Mutex::new(Pipe { child, stdin, stdout }), id: String::new() };
        let r = enc.call(&Request::Id).map_err(|e| Error::Transport { context: "encoder id".into(), message: e.to_string() })?;
        enc.id = r.id.ok_or_else(|| Error::Transport { context: "encoder id".into(), message: "no id in reply".into() })?;
        Ok(enc)
    }

    fn call(&self, req: &Request<'_>) -> Result<Response, ClientError> {
        let mut pipe = self.pipe.lock().unwrap_or_else(|e| e.into_inner());
        let mut line = serde_json::to_vec(req)?;
        line.push(b'\n');
        pipe.stdin.write_all(&line)?;
        pipe.stdin.flush()?;
        let mut reply = String::new();
        if pipe.stdout.read_line(&mut reply)? == 0 {
            return Err("encoder process closed its output".into());
        }
        let r: Response = serde_json::from_str(&reply)?;
        if let Some(e) = r.error {
            return Err(e.into());
        }
        Ok(r)
    }

    fn embeddings(&self, req: &Request<'_>, expected: usize) -> Result<Vec<Vec<f32>>, ClientError> {
        let e = self.call(req)?.embeddings.ok_or("reply has no embeddings")?;
        if e.len() != expected {
            return Err(format!("expected {expected} embeddings, got {}", e.len()).into());
        }
        Ok(e)
    }
}

impl Drop for ExternalEncoder {
    fn drop(&mut self) {
        let pipe = self.pipe.get_mut().unwrap_or_else(|e| e.into_inner());
        let _ = pipe.child.kill();
        let _ = pipe.child.wait();
    }
}

impl TextEncoder for ExternalEncoder {
    fn encode_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        self.embeddings(&Request::Texts { texts }, texts.len())
    }
}

impl EmbeddingClient for ExternalEncoder {
    fn encoder_id(&self) -> String {
        self.id.clone()
    }

    fn encode_images(&self, images: &[RgbImage]) -> Result<Vec<Vec<f32>>, ClientError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let encoded = images
            .iter()
            .map(|img| {
                let mut png = Vec::new();
                img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
                Ok(b64.encode(png))
            })
            .collect::<Result<Vec<_>, ClientError>>()?;
        self.embeddings(&Request::Images { images: encoded }, images.len())
    }
}
