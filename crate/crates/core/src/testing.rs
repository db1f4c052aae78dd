//! Small fixtures shared by unit tests, integration tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::hashgrid::HashGridConfig;
use crate::field::{Field, FieldConfig};
use crate::render::Camera;

/// A field small enough for exhaustive finite-difference checks.
pub fn tiny_field_config() -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 3,
            features_per_level: 2,
            log2_table_size: 8,
            base_resolution: 2,
            max_resolution: 8,
        },
        sdf_hidden: 8,
        sdf_layers: 2,
        color_hidden: 4,
        ..FieldConfig::default()
    }
}

/// A tiny 64-bit field with large random tables, so encoder features
/// matter in gradient checks.
pub fn lively_field(objects: usize, seed: u64) -> Field<f64> {
    let mut f = Field::<f64>::new(tiny_field_config(), objects, 0.4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in &mut f.params.tables {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    f.params.color_b1.data_mut().iter_mut().for_each(|v| *v = 0.1);
    f
}

/// A 2×2 camera whose four rays all cross the default scene bounds.
pub fn micro_camera() -> Camera {
    Camera::orbit(25.0, 15.0, 2.5, 20.0, 2, 2)
}

/// What the guidance stub answers to one request.
pub enum StubReply {
    Json(crate::guidance::WireResponse),
    Raw { status: u16, body: String },
    /// Accepts the request and never answers within the given time.
    Stall(std::time::Duration),
}

/// A single-threaded HTTP server on `127.0.0.1` answering `POST /guidance`
/// with `handler`. Returns the `host:port` address; the server thread lives
/// until the process exits.
pub fn guidance_stub<F>(handler: F) -> String
where
    F: Fn(crate::guidance::WireRequest) -> StubReply + Send + 'static,
{
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let addr = listener.local_addr().expect("stub address").to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0u8; length];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let reply = match serde_json::from_slice(&body) {
                Ok(req) => handler(req),
                Err(e) => StubReply::Raw {
                    status: 400,
                    body: e.to_string(),
                },
            };
            let (status, body) = match reply {
                StubReply::Json(r) => (200, serde_json::to_string(&r).expect("serialize reply")),
                StubReply::Raw { status, body } => (status, body),
                StubReply::Stall(d) => {
                    std::thread::sleep(d);
                    continue;
                }
            };
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes()).and_then(|_| stream.write_all(body.as_bytes()));
        }
    });
    addr
}
