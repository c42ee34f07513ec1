//! Runs the real binary, restarts it on the same data directory and talks
//! plain HTTP/1.1 to it.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use serde_json::{json, Value};

struct Server {
    child: Child,
    addr: SocketAddr,
}

impl Server {
    fn start(data_dir: &Path) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_dope-service"))
            .env("DOPE_DATA_DIR", data_dir)
            .env("DOPE_BIND_ADDR", "127.0.0.1:0")
            .env("DOPE_WORKERS", "1")
            .env("RUST_LOG", "info")
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
        let addr = loop {
            let line = lines.next().expect("server exited before listening").unwrap();
            if let Some(rest) = line.split("listening on ").nth(1) {
                break rest.trim().parse().unwrap();
            }
        };
        std::thread::spawn(move || lines.for_each(drop));
        Self { child, addr }
    }

    fn request(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, String) {
        let body = body.map(Value::to_string).unwrap_or_default();
        let mut stream = TcpStream::connect(self.addr).unwrap();
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut raw = String::new();
        stream.read_to_string(&mut raw).unwrap();
        let (head, rest) = raw.split_once("\r\n\r\n").unwrap();
        let status = head.split(' ').nth(1).unwrap().parse().unwrap();
        let chunked = head.to_ascii_lowercase().contains("transfer-encoding: chunked");
        (status, if chunked { dechunk(rest) } else { rest.to_string() })
    }

    fn json(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
        let (status, text) = self.request(method, path, body);
        (status, serde_json::from_str(&text).unwrap())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

#[test]
fn killed_server_resumes_sessions_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let body = json!({
        "n_individuals": 5, "clusters": [[0, 1], [2, 3, 4]],
        "p_primary": 0.2, "p_secondary": 0.3, "p_basal": 0.02,
        "p_false_negative": 0.1, "p_false_positive": 0.01,
        "k_pools_per_step": 2, "interval": [0.01, 0.99],
        "mc_samples": 1000, "burn_in": 200, "n_restarts": 2, "max_steps": 20, "seed": 3
    });
    let (sid, before, log) = {
        let server = Server::start(dir.path());
        let (status, created) = server.json("POST", "/v1/sessions", Some(&body));
        assert_eq!(status, 201, "{created}");
        let sid = created["session_id"].as_str().unwrap().to_string();
        let (status, resp) = server.json("POST", &format!("/v1/sessions/{sid}/results"), Some(&json!({"round": 1, "results": [true, false]})));
        assert_eq!(status, 200, "{resp}");
        let (_, before) = server.json("GET", &format!("/v1/sessions/{sid}"), None);
        let (status, log) = server.request("GET", &format!("/v1/sessions/{sid}/log"), None);
        assert_eq!(status, 200);
        (sid, before, log)
    };
    assert_eq!(log.as_bytes(), std::fs::read(dir.path().join(format!("{sid}.jsonl"))).unwrap());

    let server = Server::start(dir.path());
    let (status, after) = server.json("GET", &format!("/v1/sessions/{sid}"), None);
    assert_eq!(status, 200);
    assert_eq!(before, after);
    let round = after["round"].as_u64().unwrap();
    if let Some(next) = after.get("pending_design") {
        assert_eq!(next["round"].as_u64().unwrap(), round + 1);
        let k = next["pools"].as_array().unwrap().len();
        let (status, _) = server.json("POST", &format!("/v1/sessions/{sid}/results"), Some(&json!({"round": round + 1, "results": vec![false; k]})));
        assert_eq!(status, 200);
    }
    let (status, listed) = server.json("GET", "/v1/sessions", None);
    assert_eq!((status, listed.as_array().unwrap().len()), (200, 1));
}
