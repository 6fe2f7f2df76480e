//! Starts the WebSocket service in-process and talks to it as two clients.
//!
//!     cargo run --example service_client

use futures_util::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;
use ttm::service::{Server, ServiceConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = Server::bind(ServiceConfig::new("127.0.0.1:0".parse()?)).await?;
    let url = format!("ws://{}", server.local_addr());
    tokio::spawn(server.run());

    let (ann, _) = tokio_tungstenite::connect_async(&url).await?;
    let (bob, _) = tokio_tungstenite::connect_async(&url).await?;
    let mut clients = [("ann", ann), ("bob", bob)];
    let requests = [
        (
            0,
            r#"{"request_id":1,"room_id":"lobby","type":"join","payload":{"display_name":"ann"}}"#,
        ),
        (
            1,
            r#"{"request_id":1,"room_id":"lobby","type":"join","payload":{"display_name":"bob"}}"#,
        ),
        (
            0,
            r#"{"request_id":2,"room_id":"lobby","type":"speak","payload":{"text":"morning, thanks for joining"}}"#,
        ),
        (
            1,
            r#"{"request_id":2,"room_id":"lobby","type":"vote","payload":{"ballot":{"for":"admin","target":"ann"}}}"#,
        ),
        (1, r#"{"request_id":3,"type":"ping"}"#),
    ];
    for (i, frame) in requests {
        println!("{} >> {frame}", clients[i].0);
        clients[i].1.send(Message::text(frame)).await?;
    }
    // drain what each client has received so far
    for (name, client) in &mut clients {
        while let Ok(Some(frame)) =
            tokio::time::timeout(std::time::Duration::from_millis(200), client.next()).await
        {
            if let Message::Text(text) = frame? {
                println!("{name} << {text}");
            }
        }
    }
    Ok(())
}
