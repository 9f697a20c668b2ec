//! Analytic oracles used by tests and the bundled `convrt-mock-oracle` binary.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wire::{
    f32_from_payload, f32_payload, read_message, write_message, Header, MessageKind, ProtocolError, Status, PROTOCOL_VERSION,
};
use super::{Capabilities, ImageView, LossOracle, OracleError, OracleOutput, PromptPair};

/// Mean pixel value as the semantic loss, MSE to the reference as the perceptual one.
#[derive(Clone, Debug, Default)]
pub struct MeanPixelOracle;

fn mse_output(image: &ImageView<'_>, reference: &ImageView<'_>) -> Result<OracleOutput, OracleError> {
    if image.dims != reference.dims {
        return Err(OracleError::BadResponse(format!(
            "reference dims {:?} differ from image dims {:?}",
            reference.dims, image.dims
        )));
    }
    let n = image.data.len() as f64;
    let mut loss = 0.0;
    let grad = image
        .data
        .iter()
        .zip(reference.data)
        .map(|(&a, &b)| {
            loss += (a - b) * (a - b);
            2.0 * (a - b) / n
        })
        .collect();
    Ok(OracleOutput { loss: loss / n, grad })
}

impl LossOracle for MeanPixelOracle {
    fn describe(&self) -> String {
        "mock mean-pixel".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::all()
    }

    fn semantic(&mut self, image: &ImageView<'_>, _prompts: &PromptPair) -> Result<OracleOutput, OracleError> {
        let n = image.data.len() as f64;
        Ok(OracleOutput {
            loss: image.data.iter().sum::<f64>() / n,
            grad: vec![1.0 / n; image.data.len()],
        })
    }

    fn perceptual(&mut self, image: &ImageView<'_>, reference: &ImageView<'_>) -> Result<OracleOutput, OracleError> {
        mse_output(image, reference)
    }
}

/// `−(cos(I, p) − cos(I, n))` with the flattened image as its own embedding.
///
/// With no explicit embeddings the two prompt vectors are derived from the prompt
/// text, so the loss is a fixed smooth function of the image for a given pair.
#[derive(Clone, Debug, Default)]
pub struct CosineOracle {
    pub positive: Option<Vec<f64>>,
    pub negative: Option<Vec<f64>>,
}

fn text_embedding(text: &str, len: usize) -> Vec<f64> {
    // FNV-1a of the prompt seeds the generator
    let seed = text
        .bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity and its gradient with respect to `x`.
fn cosine(x: &[f64], e: &[f64]) -> (f64, Vec<f64>) {
    let (nx, ne) = (dot(x, x).sqrt().max(1e-12), dot(e, e).sqrt().max(1e-12));
    let c = dot(x, e) / (nx * ne);
    let grad = x.iter().zip(e).map(|(&xi, &ei)| ei / (nx * ne) - c * xi / (nx * nx)).collect();
    (c, grad)
}

impl CosineOracle {
    pub fn with_embeddings(positive: Vec<f64>, negative: Vec<f64>) -> Self {
        Self {
            positive: Some(positive),
            negative: Some(negative),
        }
    }
}

impl LossOracle for CosineOracle {
    fn describe(&self) -> String {
        "mock cosine".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::all()
    }

    fn semantic(&mut self, image: &ImageView<'_>, prompts: &PromptPair) -> Result<OracleOutput, OracleError> {
        let n = image.data.len();
        let p = self.positive.clone().unwrap_or_else(|| text_embedding(&prompts.positive, n));
        let q = self.negative.clone().unwrap_or_else(|| text_embedding(&prompts.negative, n));
        if p.len() != n || q.len() != n {
            return Err(OracleError::BadResponse(format!(
                "embeddings of length {}/{} do not match image of {n} values",
                p.len(),
                q.len()
            )));
        }
        let (cp, gp) = cosine(image.data, &p);
        let (cn, gn) = cosine(image.data, &q);
        Ok(OracleOutput {
            loss: -(cp - cn),
            grad: gp.iter().zip(&gn).map(|(a, b)| b - a).collect(),
        })
    }

    fn perceptual(&mut self, image: &ImageView<'_>, reference: &ImageView<'_>) -> Result<OracleOutput, OracleError> {
        mse_output(image, reference)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MockMode {
    MeanPixel,
    Cosine,
}

/// Behaviour switches of the served mock.
#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub mode: MockMode,
    /// Exit without replying once this many evaluation requests have been answered.
    pub crash_after: Option<usize>,
    pub protocol_version: String,
    /// Reply with NaN gradients.
    pub nan_grad: bool,
    /// Sleep this long before every evaluation reply.
    pub delay_ms: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            mode: MockMode::MeanPixel,
            crash_after: None,
            protocol_version: PROTOCOL_VERSION.into(),
            nan_grad: false,
            delay_ms: 0,
        }
    }
}

/// Why [`serve`] stopped.
#[derive(Debug, PartialEq, Eq)]
pub enum ServeExit {
    Shutdown,
    EndOfStream,
    Crashed,
}

fn eval_reply(oracle: &mut dyn LossOracle, header: &Header, payload: &[u8], opts: &ServeOptions) -> Result<(Header, Vec<u8>), String> {
    let dims = header.dims.ok_or("missing dims")?;
    let n: usize = dims.iter().product();
    let values: Vec<f64> = f32_from_payload(payload)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(f64::from)
        .collect();
    let want = if header.has_reference { 2 * n } else { n };
    if values.len() != want {
        return Err(format!("payload has {} floats, dims {dims:?} need {want}", values.len()));
    }
    let image = ImageView::new(dims, &values[..n]);
    let out = match header.kind {
        MessageKind::SemanticEval => {
            let prompts = PromptPair {
                positive: header.positive.clone().unwrap_or_default(),
                negative: header.negative.clone().unwrap_or_default(),
            };
            oracle.semantic(&image, &prompts)
        }
        _ => {
            if !header.has_reference {
                return Err("perceptual request without reference".into());
            }
            oracle.perceptual(&image, &ImageView::new(dims, &values[n..]))
        }
    }
    .map_err(|e| e.to_string())?;
    let grad = if opts.nan_grad {
        f32_payload(std::iter::repeat_n(f32::NAN, n))
    } else {
        f32_payload(out.grad.iter().map(|&g| g as f32))
    };
    let h = Header {
        loss: Some(out.loss),
        dims: Some(dims),
        payload_bytes: grad.len(),
        ..Header::response(Status::Ok)
    };
    Ok((h, grad))
}

/// Request loop of the mock oracle over arbitrary streams.
pub fn serve<R: Read, W: Write>(input: &mut R, output: &mut W, opts: &ServeOptions) -> Result<ServeExit, ProtocolError> {
    let mut oracle: Box<dyn LossOracle> = match opts.mode {
        MockMode::MeanPixel => Box::new(MeanPixelOracle),
        MockMode::Cosine => Box::new(CosineOracle::default()),
    };
    let mut answered = 0usize;
    loop {
        let Some((header, payload)) = read_message(input)? else {
            return Ok(ServeExit::EndOfStream);
        };
        match header.kind {
            MessageKind::Hello => {
                let h = Header {
                    version: Some(opts.protocol_version.clone()),
                    capabilities: Some(vec!["semantic".into(), "perceptual".into()]),
                    preprocessing: Some("none (operates on raw pixels)".into()),
                    message: Some(oracle.describe()),
                    ..Header::response(Status::Ok)
                };
                write_message(output, &h, &[])?;
            }
            MessageKind::Shutdown => {
                write_message(output, &Header::response(Status::Ok), &[])?;
                return Ok(ServeExit::Shutdown);
            }
            MessageKind::SemanticEval | MessageKind::PerceptualEval => {
                if opts.crash_after.is_some_and(|n| answered >= n) {
                    return Ok(ServeExit::Crashed);
                }
                if opts.delay_ms > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(opts.delay_ms));
                }
                match eval_reply(oracle.as_mut(), &header, &payload, opts) {
                    Ok((h, p)) => write_message(output, &h, &p)?,
                    Err(msg) => write_message(output, &Header::error(msg), &[])?,
                }
                answered += 1;
            }
            MessageKind::Response => write_message(output, &Header::error("unexpected response message"), &[])?,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_pixel_values() {
        let img = [0.2, 0.4, 0.6, 0.8];
        let out = MeanPixelOracle
            .semantic(&ImageView::new([1, 2, 2], &img), &PromptPair::default())
            .unwrap();
        assert!((out.loss - 0.5).abs() < 1e-15);
        assert!(out.grad.iter().all(|&g| g == 0.25));
    }

    #[test]
    fn cosine_examples() {
        let img = [0.3, 0.1, 0.0, 0.5];
        let neg = vec![-0.1, 0.3, 1.0, 0.0];
        let mut o = CosineOracle::with_embeddings(img.to_vec(), neg.clone());
        let out = o.semantic(&ImageView::new([2, 2, 1], &img), &PromptPair::default()).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-12, "{}", out.loss);
        let mut same = CosineOracle::with_embeddings(neg.clone(), neg);
        let out = same.semantic(&ImageView::new([2, 2, 1], &img), &PromptPair::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cosine_gradient_matches_differences() {
        let x = [0.3, 0.7, 0.2, 0.9, 0.4, 0.1];
        let prompts = PromptPair::default();
        let mut o = CosineOracle::default();
        let f = |o: &mut CosineOracle, v: &[f64]| o.semantic(&ImageView::new([1, 2, 3], v), &prompts).unwrap();
        let base = f(&mut o, &x);
        for i in 0..x.len() {
            let h = 1e-6;
            let (mut a, mut b) = (x, x);
            a[i] += h;
            b[i] -= h;
            let num = (f(&mut o, &a).loss - f(&mut o, &b).loss) / (2.0 * h);
            assert!((num - base.grad[i]).abs() < 1e-7, "{i}: {num} vs {}", base.grad[i]);
        }
        assert!((-2.0..=2.0).contains(&base.loss));
    }

    #[test]
    fn perceptual_is_mse() {
        let a = [0.1, 0.5, 0.9];
        let b = [0.2, 0.5, 0.6];
        let out = MeanPixelOracle
            .perceptual(&ImageView::new([1, 3, 1], &a), &ImageView::new([1, 3, 1], &b))
            .unwrap();
        assert!((out.loss - (0.01 + 0.09) / 3.0).abs() < 1e-15);
        let zero = MeanPixelOracle
            .perceptual(&ImageView::new([1, 3, 1], &a), &ImageView::new([1, 3, 1], &a))
            .unwrap();
        assert_eq!(zero.loss, 0.0);
    }

    #[test]
    fn crash_after_stops_before_reply() {
        let dims = [1, 1, 1];
        let eval = Header {
            dims: Some(dims),
            payload_bytes: 4,
            ..Header::new(MessageKind::SemanticEval)
        };
        let mut input = Vec::new();
        for _ in 0..3 {
            input.extend(super::super::wire::frame_message(&eval, &0.5f32.to_le_bytes()).unwrap());
        }
        let mut out = Vec::new();
        let opts = ServeOptions {
            crash_after: Some(2),
            ..Default::default()
        };
        let exit = serve(&mut input.as_slice(), &mut out, &opts).unwrap();
        assert_eq!(exit, ServeExit::Crashed);
        let mut cur = out.as_slice();
        let mut replies = 0;
        while let Some((h, _)) = read_message(&mut cur).unwrap() {
            assert_eq!(h.status, Some(Status::Ok));
            replies += 1;
        }
        assert_eq!(replies, 2);
    }
}
