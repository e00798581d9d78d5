//! Gateway protocol tests over real TCP connections.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;

use ctxreuse::gateway::{self, GatewayCore, GatewayOptions};
use ctxreuse::workload;

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream
            .set_read_timeout(Some(std::time::Duration::from_secs(10)))
            .unwrap();
        Client {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn roundtrip(&mut self, line: &str) -> String {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
        self.writer.flush().unwrap();
        let mut reply = String::new();
        self.reader.read_line(&mut reply).unwrap();
        reply.trim_end().to_string()
    }
}

/// Seeds the data directory with the three-context worked example, using
/// numeric document names.
fn seed_worked_example(data_dir: &Path) {
    let trace_path = data_dir.join("seed.jsonl");
    let mut lines = String::new();
    for (session, docs) in [
        ("c1", ["2", "1", "3"]),
        ("c2", ["2", "6", "1"]),
        ("c3", ["4", "1", "0"]),
    ] {
        lines.push_str(&format!(
            "{{\"session_id\":\"{session}\",\"turn\":0,\"retrieved\":[{}],\"doc_tokens\":{{{}}}}}\n",
            docs.map(|d| format!("\"{d}\"")).join(","),
            docs.map(|d| format!("\"{d}\":1024")).join(","),
        ));
    }
    std::fs::write(&trace_path, lines).unwrap();

    let mut trace = workload::load_trace(&trace_path).unwrap();
    trace.canonicalize_doc_order();
    let contexts: Vec<_> = trace
        .records
        .iter()
        .map(|r| r.to_context().unwrap())
        .collect();
    let mut core = GatewayCore::open(data_dir, GatewayOptions::default()).unwrap();
    core.seed_index(&contexts, trace.interner).unwrap();
}

#[test]
fn reorder_request_against_seeded_index() {
    let dir = tempfile::tempdir().unwrap();
    seed_worked_example(dir.path());
    let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
    let mut client = Client::connect(handle.addr());

    let reply = client.roundtrip(
        r#"{"session_id":"u-order","turn":0,"retrieved":["2","1","4"],"doc_tokens":{"2":1024,"1":1024,"4":1024},"question":"what changed?"}"#,
    );
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(
        v["ordered_docs"],
        serde_json::json!(["1", "2", "4"]),
        "reply: {reply}"
    );
    assert_eq!(
        v["order_hint"],
        "Please read the context in the following priority order: \
         [Doc_2] > [Doc_1] > [Doc_4] and answer the question."
    );
    assert!(v["dedup_refs"].as_array().unwrap().is_empty());
    let prompt = v["prompt_text"].as_str().unwrap();
    assert!(prompt.starts_with("[Doc_1]\n\n[Doc_2]\n\n[Doc_4]\n\n"));
    assert!(prompt.ends_with("what changed?"));

    handle.shutdown();
}

#[test]
fn multi_turn_session_over_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
    let mut client = Client::connect(handle.addr());

    // Turn 0: no dedup refs, no location hints.
    let reply = client.roundtrip(
        r#"{"session_id":"s1","turn":0,"retrieved":["a","b","c"],"doc_tokens":{"a":512,"b":512,"c":512},"question":"q0"}"#,
    );
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert!(v["dedup_refs"].as_array().unwrap().is_empty());
    assert!(v["location_hints"].as_array().unwrap().is_empty());

    // Turn 1: overlapping retrieval gets de-duplicated with hints.
    let reply = client.roundtrip(
        r#"{"session_id":"s1","turn":1,"retrieved":["a","d","b"],"doc_tokens":{"a":512,"b":512,"d":512},"question":"q1"}"#,
    );
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["ordered_docs"], serde_json::json!(["d"]));
    assert_eq!(
        v["location_hints"],
        serde_json::json!([
            "Please refer to [Doc_a] in the previous conversation",
            "Please refer to [Doc_b] in the previous conversation"
        ])
    );
    // Hints occupy the removed documents' retrieval slots.
    assert!(v["prompt_text"].as_str().unwrap().starts_with(
        "Please refer to [Doc_a] in the previous conversation\n\n\
         [Doc_d]\n\n\
         Please refer to [Doc_b] in the previous conversation"
    ));

    handle.shutdown();
}

#[test]
fn malformed_and_unknown_requests_keep_the_connection_alive() {
    let dir = tempfile::tempdir().unwrap();
    let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
    let mut client = Client::connect(handle.addr());

    let reply = client.roundtrip("{{{ garbage");
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert!(v["error"].as_str().unwrap().contains("malformed"));

    // Unknown session on a continuation turn.
    let reply = client
        .roundtrip(r#"{"session_id":"ghost","turn":3,"retrieved":["a"],"doc_tokens":{"a":8}}"#);
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert!(v["error"].as_str().unwrap().contains("ghost"));

    // The connection still serves valid requests.
    let reply = client.roundtrip(
        r#"{"session_id":"ok","turn":0,"retrieved":["a"],"doc_tokens":{"a":8},"question":"q"}"#,
    );
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["ordered_docs"], serde_json::json!(["a"]));

    handle.shutdown();
}

#[test]
fn cache_events_accepted_singly_and_in_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
    let mut client = Client::connect(handle.addr());

    client.roundtrip(
        r#"{"session_id":"s","turn":0,"retrieved":["a","b"],"doc_tokens":{"a":512,"b":512}}"#,
    );
    let reply = client.roundtrip(r#"{"type":"appended","path":[0],"n_tokens":1024}"#);
    assert_eq!(reply, r#"{"ok":true,"applied":1}"#);
    let reply =
        client.roundtrip(r#"[{"type":"accessed","path":[0]},{"type":"evicted","n_tokens":24}]"#);
    assert_eq!(reply, r#"{"ok":true,"applied":2}"#);
    let reply = client.roundtrip(r#"{"type":"stats"}"#);
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["cached_tokens"], 1000);
    assert_eq!(v["sessions"], 1);

    handle.shutdown();
}

#[test]
fn session_state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
        let mut client = Client::connect(handle.addr());
        client.roundtrip(
            r#"{"session_id":"s1","turn":0,"retrieved":["a","b"],"doc_tokens":{"a":512,"b":512}}"#,
        );
        handle.shutdown();
    }
    // Fresh process over the same data directory.
    let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
    let mut client = Client::connect(handle.addr());
    let reply = client.roundtrip(
        r#"{"session_id":"s1","turn":1,"retrieved":["b","z"],"doc_tokens":{"b":512,"z":512}}"#,
    );
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["ordered_docs"], serde_json::json!(["z"]));
    assert_eq!(v["dedup_refs"][0]["doc"], "b");
    handle.shutdown();
}

#[test]
fn replayed_request_log_yields_identical_reply_log() {
    let log = [
        r#"{"session_id":"a","turn":0,"retrieved":["1","2","3"],"doc_tokens":{"1":256,"2":256,"3":256},"question":"qa0"}"#,
        r#"{"session_id":"b","turn":0,"retrieved":["2","1","9"],"doc_tokens":{"2":256,"1":256,"9":256},"question":"qb0"}"#,
        r#"{"type":"appended","path":[0],"n_tokens":768}"#,
        r#"{"session_id":"a","turn":1,"retrieved":["3","4"],"doc_tokens":{"3":256,"4":256},"question":"qa1"}"#,
        r#"not even json"#,
        r#"{"type":"stats"}"#,
        r#"{"session_id":"b","turn":1,"retrieved":["1","7"],"doc_tokens":{"1":256,"7":256},"question":"qb1"}"#,
    ];

    let run = || -> Vec<String> {
        let dir = tempfile::tempdir().unwrap();
        let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
        let mut client = Client::connect(handle.addr());
        let replies = log.iter().map(|l| client.roundtrip(l)).collect();
        handle.shutdown();
        replies
    };

    assert_eq!(run(), run());
}

#[test]
fn concurrent_connections_share_one_state() {
    let dir = tempfile::tempdir().unwrap();
    let handle = gateway::serve("127.0.0.1:0", dir.path(), GatewayOptions::default()).unwrap();
    let addr = handle.addr();

    let threads: Vec<_> = (0..4)
        .map(|t| {
            std::thread::spawn(move || {
                let mut client = Client::connect(addr);
                for i in 0..5 {
                    let reply = client.roundtrip(&format!(
                        r#"{{"session_id":"t{t}-{i}","turn":0,"retrieved":["x{t}"],"doc_tokens":{{"x{t}":64}}}}"#
                    ));
                    assert!(reply.contains("ordered_docs"), "reply: {reply}");
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }

    let mut client = Client::connect(addr);
    let reply = client.roundtrip(r#"{"type":"stats"}"#);
    let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["sessions"], 20);
    handle.shutdown();
}
