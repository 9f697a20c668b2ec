use std::io::BufReader;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{f32_from_payload, f32_payload, read_message, write_message, Header, MessageKind, ProtocolError, Status, PROTOCOL_VERSION};
use super::{Capabilities, ImageView, LossOracle, OracleError, OracleOutput, PromptPair};

type Incoming = Result<(Header, Vec<u8>), ProtocolError>;

/// Child process speaking the oracle protocol on stdin/stdout.
pub struct ProcessOracle {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    replies: Receiver<Incoming>,
    timeout: Duration,
    capabilities: Capabilities,
    preprocessing: Option<String>,
}

/// Starts `command` (shell-style quoting), performs the handshake and checks the version.
pub fn spawn_oracle(command: &str, env: &[(String, String)], prompts: &PromptPair, timeout: Duration) -> Result<ProcessOracle, OracleError> {
    let spawn_err = |reason: String| OracleError::Spawn {
        command: command.to_string(),
        reason,
    };
    let argv = shlex::split(command).filter(|a| !a.is_empty()).ok_or_else(|| spawn_err("empty or unparsable command line".into()))?;
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .envs(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| spawn_err(e.to_string()))?;
    let stdin = child.stdin.take();
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut r = BufReader::new(stdout);
        loop {
            match read_message(&mut r) {
                Ok(Some(msg)) => {
                    if tx.send(Ok(msg)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    let mut oracle = ProcessOracle {
        command: command.to_string(),
        child,
        stdin,
        replies: rx,
        timeout,
        capabilities: Capabilities::default(),
        preprocessing: None,
    };
    oracle.hello(prompts)?;
    Ok(oracle)
}

impl ProcessOracle {
    fn hello(&mut self, prompts: &PromptPair) -> Result<(), OracleError> {
        let h = Header {
            version: Some(PROTOCOL_VERSION.into()),
            positive: Some(prompts.positive.clone()),
            negative: Some(prompts.negative.clone()),
            ..Header::new(MessageKind::Hello)
        };
        let (reply, _) = self.call(&h, &[])?;
        let got = reply.version.unwrap_or_default();
        if got != PROTOCOL_VERSION {
            return Err(OracleError::VersionMismatch {
                expected: PROTOCOL_VERSION.into(),
                got,
            });
        }
        self.capabilities = Capabilities::from_names(&reply.capabilities.unwrap_or_default());
        self.preprocessing = reply.preprocessing;
        Ok(())
    }

    /// Preprocessing policy reported in the handshake.
    pub fn preprocessing(&self) -> Option<&str> {
        self.preprocessing.as_deref()
    }

    fn call(&mut self, header: &Header, payload: &[u8]) -> Result<(Header, Vec<u8>), OracleError> {
        let stdin = self.stdin.as_mut().ok_or(OracleError::Closed)?;
        if let Err(e) = write_message(stdin, header, payload) {
            self.stdin = None;
            return Err(e.into());
        }
        let (reply, body) = match self.replies.recv_timeout(self.timeout) {
            Ok(m) => m?,
            Err(RecvTimeoutError::Timeout) => return Err(OracleError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(OracleError::Closed),
        };
        match reply.status {
            Some(Status::Ok) if reply.kind == MessageKind::Response => Ok((reply, body)),
            Some(Status::Error) => Err(OracleError::Remote(reply.message.unwrap_or_default())),
            _ => Err(OracleError::BadResponse(format!("unexpected {:?} message", reply.kind))),
        }
    }

    fn evaluate(&mut self, mut header: Header, images: &[&ImageView<'_>]) -> Result<OracleOutput, OracleError> {
        let dims = images[0].dims;
        let n = images[0].data.len();
        let payload = f32_payload(images.iter().flat_map(|im| im.data.iter().map(|&v| v as f32)));
        header.dims = Some(dims);
        header.payload_bytes = payload.len();
        let (reply, body) = self.call(&header, &payload)?;
        let loss = reply.loss.ok_or_else(|| OracleError::BadResponse("response has no loss".into()))?;
        if body.len() != 4 * n {
            return Err(OracleError::BadResponse(format!(
                "gradient payload has {} bytes, expected {}",
                body.len(),
                4 * n
            )));
        }
        let grad = f32_from_payload(&body)?.into_iter().map(f64::from).collect();
        Ok(OracleOutput { loss, grad })
    }
}

impl LossOracle for ProcessOracle {
    fn describe(&self) -> String {
        format!("process `{}`", self.command)
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn semantic(&mut self, image: &ImageView<'_>, prompts: &PromptPair) -> Result<OracleOutput, OracleError> {
        if !self.capabilities.semantic {
            return Err(OracleError::Unsupported("semantic"));
        }
        let h = Header {
            positive: Some(prompts.positive.clone()),
            negative: Some(prompts.negative.clone()),
            ..Header::new(MessageKind::SemanticEval)
        };
        self.evaluate(h, &[image])
    }

    fn perceptual(&mut self, image: &ImageView<'_>, reference: &ImageView<'_>) -> Result<OracleOutput, OracleError> {
        if !self.capabilities.perceptual {
            return Err(OracleError::Unsupported("perceptual"));
        }
        if image.dims != reference.dims {
            return Err(OracleError::BadResponse("reference dims differ from image dims".into()));
        }
        let h = Header {
            has_reference: true,
            ..Header::new(MessageKind::PerceptualEval)
        };
        self.evaluate(h, &[image, reference])
    }
}

impl Drop for ProcessOracle {
    fn drop(&mut self) {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = write_message(&mut stdin, &Header::new(MessageKind::Shutdown), &[]);
        }
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
