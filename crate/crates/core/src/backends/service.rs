//! Line-delimited JSON protocol for out-of-process model backends.
//!
//! Each request and each response is one JSON object on one line over a TCP
//! connection:
//!
//! ```text
//! {"op":"info"}                                   -> {"begin":"[CLS]",...,"vocabulary":[...]}
//! {"op":"masked","tokens":[...],"position":k}     -> {"probs":{"tok":p,...}}
//!                                                  | {"top":[["tok",logp],...],"other_logp":x}
//! {"op":"classify","tokens":[...]}                -> {"classes":[p0,p1]}
//! {"op":"score","tokens":[...]}                   -> {"score":x}
//! {"op":"next","tokens":[...]}                    -> same shapes as "masked"
//! any failure                                     -> {"error":"..."}
//! ```
//!
//! Truncated `top` responses are renormalized on the client, with the
//! residual mass assigned to [`CATCH_ALL`].

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backends::{
    classify_pair, next_token_distribution, predict_masked, score_choice, ChoiceScorer, Generator, Markers, MaskedLm,
    PairClassifier, VocabDistribution, END_OF_TEXT,
};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// Token that receives the mass a truncated response leaves out.
pub const CATCH_ALL: &str = "[OTHER]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Info,
    Masked { tokens: Vec<String>, position: usize },
    Classify { tokens: Vec<String> },
    Score { tokens: Vec<String> },
    Next { tokens: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInfo {
    #[serde(flatten)]
    pub markers: Markers,
    pub end_of_text: String,
    pub vocabulary: Vec<String>,
    /// Operations the server answers.
    pub ops: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Error {
        error: String,
    },
    Info(ServiceInfo),
    Probs {
        probs: BTreeMap<String, f64>,
    },
    Top {
        top: Vec<(String, f64)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        other_logp: Option<f64>,
    },
    Classes {
        classes: [f64; 2],
    },
    Score {
        score: f64,
    },
}

impl Response {
    fn into_distribution(self) -> Result<VocabDistribution> {
        match self {
            Response::Probs { probs } => VocabDistribution::from_weights(probs),
            Response::Top { top, other_logp } => VocabDistribution::from_top_k(&top, other_logp, CATCH_ALL),
            Response::Error { error } => Err(Error::Backend(error)),
            other => Err(Error::Backend(format!("expected a distribution, got {other:?}"))),
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Client for a model served over the line protocol.
///
/// Implements all four backend traits; calls are serialized over a single
/// connection.
pub struct ServiceBackend {
    address: String,
    conn: Mutex<Connection>,
    info: ServiceInfo,
}

impl std::fmt::Debug for ServiceBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceBackend")
            .field("address", &self.address)
            .finish_non_exhaustive()
    }
}

impl ServiceBackend {
    /// Connects to `host:port` (an optional `tcp://` prefix is accepted) and
    /// fetches the server's markers and vocabulary.
    pub fn connect(address: &str) -> Result<Self> {
        let addr = address.strip_prefix("tcp://").unwrap_or(address);
        let resolved = addr
            .to_socket_addrs()
            .map_err(|e| Error::io(format!("resolving {addr}"), e))?
            .next()
            .ok_or_else(|| Error::Backend(format!("{addr} did not resolve")))?;
        let stream = TcpStream::connect(resolved).map_err(|e| Error::io(format!("connecting to {addr}"), e))?;
        let writer = stream.try_clone().map_err(|e| Error::io("cloning socket", e))?;
        let conn = Connection {
            reader: BufReader::new(stream),
            writer,
        };
        let mut backend = Self {
            address: addr.to_owned(),
            conn: Mutex::new(conn),
            info: ServiceInfo {
                markers: Markers::default(),
                end_of_text: END_OF_TEXT.into(),
                vocabulary: Vec::new(),
                ops: Vec::new(),
            },
        };
        match backend.call(&Request::Info)? {
            Response::Info(info) => backend.info = info,
            Response::Error { error } => return Err(Error::Backend(error)),
            other => return Err(Error::Backend(format!("unexpected info response {other:?}"))),
        }
        Ok(backend)
    }

    pub fn info(&self) -> &ServiceInfo {
        &self.info
    }

    pub fn call(&self, request: &Request) -> Result<Response> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Backend("connection lock poisoned".into()))?;
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        let ctx = |what: &str| format!("{what} {}", self.address);
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| Error::io(ctx("sending to"), e))?;
        let mut reply = String::new();
        let n = conn
            .reader
            .read_line(&mut reply)
            .map_err(|e| Error::io(ctx("reading from"), e))?;
        if n == 0 {
            return Err(Error::Backend(format!("{} closed the connection", self.address)));
        }
        Ok(serde_json::from_str(reply.trim_end())?)
    }
}

impl MaskedLm for ServiceBackend {
    fn markers(&self) -> &Markers {
        &self.info.markers
    }

    fn vocabulary(&self) -> &[String] {
        &self.info.vocabulary
    }

    fn predict(&self, seq: &TokenSequence, position: usize) -> Result<VocabDistribution> {
        self.call(&Request::Masked {
            tokens: seq.tokens().to_vec(),
            position,
        })?
        .into_distribution()
    }
}

impl PairClassifier for ServiceBackend {
    fn markers(&self) -> &Markers {
        &self.info.markers
    }

    fn classify(&self, seq: &TokenSequence) -> Result<[f64; 2]> {
        match self.call(&Request::Classify {
            tokens: seq.tokens().to_vec(),
        })? {
            Response::Classes { classes } => {
                let total = classes[0] + classes[1];
                if !(total.is_finite() && total > 0.0) || classes.iter().any(|p| *p < 0.0) {
                    return Err(Error::Backend(format!("invalid class weights {classes:?}")));
                }
                Ok(classes.map(|p| p / total))
            }
            Response::Error { error } => Err(Error::Backend(error)),
            other => Err(Error::Backend(format!("expected classes, got {other:?}"))),
        }
    }
}

impl ChoiceScorer for ServiceBackend {
    fn markers(&self) -> &Markers {
        &self.info.markers
    }

    fn score(&self, seq: &TokenSequence) -> Result<f64> {
        match self.call(&Request::Score {
            tokens: seq.tokens().to_vec(),
        })? {
            Response::Score { score } => Ok(score),
            Response::Error { error } => Err(Error::Backend(error)),
            other => Err(Error::Backend(format!("expected a score, got {other:?}"))),
        }
    }
}

impl Generator for ServiceBackend {
    fn end_of_text(&self) -> &str {
        &self.info.end_of_text
    }

    fn next_token(&self, prefix: &[String]) -> Result<VocabDistribution> {
        self.call(&Request::Next {
            tokens: prefix.to_vec(),
        })?
        .into_distribution()
    }
}

/// Models exposed by [`serve`]. Any subset may be present.
#[derive(Default, Clone)]
pub struct ServedModels {
    pub masked: Option<Arc<dyn MaskedLm>>,
    pub classifier: Option<Arc<dyn PairClassifier>>,
    pub scorer: Option<Arc<dyn ChoiceScorer>>,
    pub generator: Option<Arc<dyn Generator>>,
    /// Answer distributions in truncated form with this many entries.
    pub top_k: Option<usize>,
}

impl ServedModels {
    fn markers(&self) -> Markers {
        self.masked
            .as_ref()
            .map(|m| m.markers().clone())
            .or_else(|| self.scorer.as_ref().map(|s| s.markers().clone()))
            .or_else(|| self.classifier.as_ref().map(|c| c.markers().clone()))
            .unwrap_or_default()
    }

    fn info(&self) -> ServiceInfo {
        let mut ops = vec!["info".to_string()];
        for (present, op) in [
            (self.masked.is_some(), "masked"),
            (self.classifier.is_some(), "classify"),
            (self.scorer.is_some(), "score"),
            (self.generator.is_some(), "next"),
        ] {
            if present {
                ops.push(op.into());
            }
        }
        ServiceInfo {
            markers: self.markers(),
            end_of_text: self
                .generator
                .as_ref()
                .map_or_else(|| END_OF_TEXT.to_string(), |g| g.end_of_text().to_owned()),
            vocabulary: self
                .masked
                .as_ref()
                .map(|m| m.vocabulary().to_vec())
                .unwrap_or_default(),
            ops,
        }
    }

    fn encode(&self, dist: VocabDistribution) -> Response {
        match self.top_k {
            None => Response::Probs {
                probs: dist.as_map().clone(),
            },
            Some(k) => {
                let mut entries: Vec<(&str, f64)> = dist.iter().filter(|(_, p)| *p > 0.0).collect();
                entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                let residual: f64 = entries.iter().skip(k).map(|(_, p)| p).sum();
                Response::Top {
                    top: entries.iter().take(k).map(|(t, p)| (t.to_string(), p.ln())).collect(),
                    other_logp: (residual > 0.0).then(|| residual.ln()),
                }
            }
        }
    }

    fn try_handle(&self, request: Request) -> Result<Response> {
        let missing = |op: &str| Error::Backend(format!("this server does not answer {op:?}"));
        let markers = self.markers();
        match request {
            Request::Info => Ok(Response::Info(self.info())),
            Request::Masked { tokens, position } => {
                let m = self.masked.as_ref().ok_or_else(|| missing("masked"))?;
                let seq = TokenSequence::with_specials_masked(tokens, position, &markers)?;
                Ok(self.encode(predict_masked(m.as_ref(), &seq, position)?))
            }
            Request::Classify { tokens } => {
                let c = self.classifier.as_ref().ok_or_else(|| missing("classify"))?;
                let seq = TokenSequence::with_specials(tokens, &markers)?;
                Ok(Response::Classes {
                    classes: classify_pair(c.as_ref(), &seq)?,
                })
            }
            Request::Score { tokens } => {
                let s = self.scorer.as_ref().ok_or_else(|| missing("score"))?;
                let seq = TokenSequence::with_specials(tokens, &markers)?;
                Ok(Response::Score {
                    score: score_choice(s.as_ref(), &seq)?,
                })
            }
            Request::Next { tokens } => {
                let g = self.generator.as_ref().ok_or_else(|| missing("next"))?;
                Ok(self.encode(next_token_distribution(g.as_ref(), &tokens)?))
            }
        }
    }

    pub fn handle(&self, request: Request) -> Response {
        self.try_handle(request)
            .unwrap_or_else(|e| Response::Error { error: e.to_string() })
    }

    /// Answers one line of protocol text.
    pub fn handle_line(&self, line: &str) -> Response {
        match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(req),
            Err(e) => Response::Error {
                error: format!("bad request: {e}"),
            },
        }
    }
}

/// Serves requests on one connection until the peer closes it.
pub fn serve_connection(stream: TcpStream, models: &ServedModels) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = serde_json::to_string(&models.handle_line(&line)).map_err(io::Error::other)?;
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve(listener: TcpListener, models: Arc<ServedModels>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let models = Arc::clone(&models);
        std::thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &models) {
                log::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_format() {
        let r = Request::Masked {
            tokens: vec!["[CLS]".into(), "[MASK]".into(), "[SEP]".into()],
            position: 1,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"op":"masked","tokens":["[CLS]","[MASK]","[SEP]"],"position":1}"#
        );
        let back: Request = serde_json::from_str(r#"{"op":"next","tokens":[]}"#).unwrap();
        assert_eq!(back, Request::Next { tokens: vec![] });
    }

    #[test]
    fn response_shapes_parse() {
        let top: Response = serde_json::from_str(r#"{"top":[["a",-0.1]],"other_logp":-2.5}"#).unwrap();
        assert!(matches!(
            top,
            Response::Top {
                other_logp: Some(_),
                ..
            }
        ));
        let probs: Response = serde_json::from_str(r#"{"probs":{"a":0.5,"b":0.5}}"#).unwrap();
        assert!(matches!(probs, Response::Probs { .. }));
        let err: Response = serde_json::from_str(r#"{"error":"boom"}"#).unwrap();
        assert!(matches!(err.into_distribution(), Err(Error::Backend(m)) if m == "boom"));
    }

    #[test]
    fn server_reports_missing_ops() {
        let models = ServedModels::default();
        let r = models.handle_line(r#"{"op":"score","tokens":["[CLS]","a","[SEP]"]}"#);
        assert!(matches!(r, Response::Error { .. }));
        let r = models.handle_line("not json");
        assert!(matches!(r, Response::Error { .. }));
    }
}
