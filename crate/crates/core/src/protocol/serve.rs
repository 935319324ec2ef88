//! Worker side of the wire protocol: expose any [`Backend`] over a stream.

use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::sync::Arc;

use super::{decode, encode, Backend, ErrorBody, Frame, Hello, TaskResponse, PROTOCOL_VERSION};

/// Answer frames from `reader` until end of stream.
///
/// Opens with a `hello`. Malformed frames are answered with an error
/// response (code `malformed_frame`, empty request id) and the loop
/// continues.
pub fn serve_stream(backend: &dyn Backend, name: &str, mut reader: impl BufRead, mut writer: impl Write) -> std::io::Result<()> {
    let hello = Frame::Hello(Hello {
        protocol_version: PROTOCOL_VERSION,
        worker: name.to_string(),
        capabilities: backend.capabilities(),
    });
    writer.write_all(&encode(&hello))?;
    writer.flush()?;

    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Ok(());
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let response = match decode(&line) {
            Ok(Frame::Request(req)) => match backend.call(&req) {
                Ok(resp) => resp,
                Err(e) => TaskResponse::error(req.request_id, ErrorBody::new("backend_failure", e.to_string())),
            },
            Ok(other) => TaskResponse::error("", ErrorBody::new("unexpected_frame", format!("{other:?}"))),
            Err(e) => TaskResponse::error("", ErrorBody::new("malformed_frame", e.to_string())),
        };
        writer.write_all(&encode(&Frame::Response(response)))?;
        writer.flush()?;
    }
}

/// Accept TCP connections forever, one thread per connection.
pub fn serve_tcp(backend: Arc<dyn Backend>, name: &str, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        let name = name.to_string();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => std::io::BufReader::new(s),
                Err(e) => {
                    log::warn!("connection clone failed: {e}");
                    return;
                }
            };
            if let Err(e) = serve_stream(&*backend, &name, reader, stream) {
                log::debug!("connection closed: {e}");
            }
        });
    }
    Ok(())
}
