#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use carrier::io::{save_embeddings, EmbeddingFormat};
use carrier_core::cloud::EmbeddingCloud;
use carrier_core::corpus::CorpusRecord;
use nalgebra::DMatrix;

pub struct Stub {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
}

/// Serves the encoder protocol on a loopback port. `handler` gets the
/// request number and the sentences and returns a status and a body.
pub fn spawn_stub<F>(handler: F) -> Stub
where
    F: Fn(usize, Vec<String>) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    let handler = Arc::new(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let counter = counter.clone();
            let handler = handler.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let sentences: Vec<String> = serde_json::from_value(req["sentences"].clone()).unwrap();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, text) = handler(n, sentences);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    Stub { url, requests }
}

fn hash(word: &str, j: usize) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ j as u64;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 29;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 32;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

/// A deterministic bag-of-words vector: every word contributes a fixed
/// pseudo-random direction.
pub fn toy_vector(sentence: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for w in sentence.split_whitespace() {
        let w = w.trim_end_matches('.');
        for (j, x) in v.iter_mut().enumerate() {
            *x += hash(w, j);
        }
    }
    v
}

pub fn toy_response(sentences: &[String], dim: usize) -> String {
    let vectors: Vec<Vec<f64>> = sentences.iter().map(|s| toy_vector(s, dim)).collect();
    serde_json::json!({ "vectors": vectors }).to_string()
}

pub fn write_toy_embeddings(records: &[CorpusRecord], dim: usize, path: &Path) {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| toy_vector(&r.sentence, dim)).collect();
    let m = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
    let cloud = EmbeddingCloud::new(m, records.iter().map(|r| r.id.clone()).collect(), "toy").unwrap();
    save_embeddings(&cloud, path, EmbeddingFormat::from_path(path)).unwrap();
}

/// Points near a unit sphere in `r` dimensions, placed in a `d`-dimensional
/// ambient space by an orthonormal frame plus an offset.
pub fn embedded_sphere(n: usize, r: usize, d: usize, noise: f64, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = carrier_core::rng::substream(seed, 0);
    let g = DMatrix::from_fn(d, r, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let frame = g.qr().q();
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let u: Vec<f64> = (0..r).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let len = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..d {
            let mut x = offset[j];
            for (k, uk) in u.iter().enumerate() {
                x += frame[(j, k)] * uk / len;
            }
            x += noise * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            out[(i, j)] = x;
        }
    }
    out
}

pub fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["carrier"];
    full.extend_from_slice(args);
    carrier::cli::main_with_args(full)
}
