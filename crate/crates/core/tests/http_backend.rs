use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use fpc_core::action::ActionVector;
use fpc_core::backends::HttpSupervisor;
use fpc_core::codec::GripperEvent;
use fpc_core::error::BackendError;
use fpc_core::runtime::{ImageRef, QueryContext, Supervisor, SupervisorQuery};

struct Captured {
    request_line: String,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order, and reports
/// each request it saw.
fn serve(replies: Vec<(u16, &'static str)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            loop {
                let mut header = String::new();
                reader.read_line(&mut header).unwrap();
                if header.trim().is_empty() {
                    break;
                }
                if let Some((name, value)) = header.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap();
                    }
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            let _ = tx.send(Captured {
                request_line: request_line.trim().to_string(),
                body: serde_json::from_slice(&raw).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn query(image: ImageRef) -> SupervisorQuery {
    SupervisorQuery {
        image,
        prompt: "Should the robot arm close its gripper in the next step?".into(),
        timestep: 12,
        event: GripperEvent::Close,
    }
}

fn ask(client: &mut HttpSupervisor, image: ImageRef) -> Result<String, BackendError> {
    let proposed = ActionVector::ZERO;
    client.respond(
        &query(image),
        &QueryContext {
            proposed: &proposed,
            truth: None,
        },
    )
}

#[test]
fn success_returns_text_verbatim() {
    let (url, seen) = serve(vec![(200, r#"{"text": "No. Move up. Large."}"#)]);
    let mut client = HttpSupervisor::new(&url, Duration::from_secs(5), 0).unwrap();
    let reply = ask(&mut client, ImageRef::Bytes(vec![1, 2, 3])).unwrap();
    assert_eq!(reply, "No. Move up. Large.");
    let req = seen.recv().unwrap();
    assert_eq!(req.request_line, "POST /v1/supervise HTTP/1.1");
    assert_eq!(req.body["timestep"], 12);
    assert_eq!(req.body["image_b64"], "AQID");
    assert!(req.body["prompt"].as_str().unwrap().contains("close its gripper"));
}

#[test]
fn missing_image_is_null() {
    let (url, seen) = serve(vec![(200, r#"{"text": "Yes."}"#)]);
    let mut client = HttpSupervisor::new(&format!("{url}/"), Duration::from_secs(5), 0).unwrap();
    assert_eq!(ask(&mut client, ImageRef::None).unwrap(), "Yes.");
    assert!(seen.recv().unwrap().body["image_b64"].is_null());
}

#[test]
fn server_error_is_reported() {
    let (url, _seen) = serve(vec![(500, "{}")]);
    let mut client = HttpSupervisor::new(&url, Duration::from_secs(5), 0).unwrap();
    assert!(matches!(
        ask(&mut client, ImageRef::None),
        Err(BackendError::Status(500))
    ));
}

#[test]
fn server_error_is_retried() {
    let (url, seen) = serve(vec![(503, "{}"), (200, r#"{"text": "Yes."}"#)]);
    let mut client = HttpSupervisor::new(&url, Duration::from_secs(5), 1).unwrap();
    assert_eq!(ask(&mut client, ImageRef::None).unwrap(), "Yes.");
    assert_eq!(seen.iter().take(2).count(), 2);
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = serve(vec![(400, "{}"), (200, r#"{"text": "Yes."}"#)]);
    let mut client = HttpSupervisor::new(&url, Duration::from_secs(5), 3).unwrap();
    assert!(matches!(
        ask(&mut client, ImageRef::None),
        Err(BackendError::Status(400))
    ));
    assert!(seen.recv_timeout(Duration::from_millis(500)).is_ok());
    assert!(seen.recv_timeout(Duration::from_millis(200)).is_err());
}

#[test]
fn missing_text_field_is_a_schema_error() {
    let (url, _seen) = serve(vec![(200, r#"{"answer": "Yes."}"#)]);
    let mut client = HttpSupervisor::new(&url, Duration::from_secs(5), 0).unwrap();
    assert!(matches!(ask(&mut client, ImageRef::None), Err(BackendError::Schema(_))));
}

#[test]
fn unreadable_image_fails_before_sending() {
    let mut client = HttpSupervisor::new("http://127.0.0.1:9", Duration::from_secs(1), 0).unwrap();
    let err = ask(&mut client, ImageRef::Path("/definitely/not/here.png".into())).unwrap_err();
    assert!(matches!(err, BackendError::Image { .. }));
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = HttpSupervisor::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2), 0).unwrap();
    assert!(matches!(
        client.probe(),
        Err(BackendError::Transport(_) | BackendError::Timeout)
    ));
}

#[test]
fn slow_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        let (_stream, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_secs(3));
    });
    let mut client = HttpSupervisor::new(&url, Duration::from_millis(200), 0).unwrap();
    assert!(matches!(ask(&mut client, ImageRef::None), Err(BackendError::Timeout)));
}
