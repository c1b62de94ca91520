use std::net::SocketAddr;
use std::time::Duration;

use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::client::IntoClientRequest;

use fybrr_core::node::api::{self, ApiClient, ApiError};
use fybrr_core::sim::{Swarm, SwarmOptions};

async fn api_for(swarm: &Swarm, i: usize) -> SocketAddr {
    api::serve(swarm.node(i).clone(), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

/// Next pushed message with the given `op`, skipping others.
async fn next_op(client: &mut ApiClient, op: &str) -> Value {
    tokio::time::timeout(Duration::from_secs(5), async {
        loop {
            let v = client.next_message().await.unwrap();
            if v["op"] == op && v.get("id").is_none() {
                return v;
            }
        }
    })
    .await
    .unwrap_or_else(|_| panic!("no `{op}` event"))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn send_reports_status_and_receiver_gets_a_push() {
    let swarm = Swarm::start(SwarmOptions {
        n_nodes: 2,
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let mut alice = ApiClient::connect(api_for(&swarm, 0).await).await.unwrap();
    let mut bob = ApiClient::connect(api_for(&swarm, 1).await).await.unwrap();

    let reply = alice
        .call(json!({"op": "send", "to": swarm.peer_id(1).to_hex(), "text": "hi bob"}))
        .await
        .unwrap();
    assert_eq!(reply["op"], "status");
    assert_eq!(reply["state"], "sent_direct");

    let pushed = next_op(&mut bob, "inbound").await;
    assert_eq!(pushed["text"], "hi bob");
    assert_eq!(pushed["from"], swarm.peer_id(0).to_hex());
    assert_eq!(pushed["path"], "direct");
    assert_eq!(pushed["msg_id"], reply["msg_id"]);

    let history = alice
        .call(json!({"op": "history", "peer": swarm.peer_id(1).to_hex()}))
        .await
        .unwrap();
    let msgs = history["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 1);
    assert_eq!(msgs[0]["op"], "outbound");
    assert_eq!(msgs[0]["state"], "sent_direct");

    let file = alice
        .call(json!({"op": "send", "to": swarm.peer_id(1).to_hex(), "filename": "a.bin", "data": "00ff10"}))
        .await
        .unwrap();
    assert_eq!(file["state"], "sent_direct");
    let pushed = next_op(&mut bob, "inbound").await;
    assert_eq!(pushed["filename"], "a.bin");
    assert_eq!(pushed["data"], "00ff10");

    let status = bob.call(json!({"op": "status"})).await.unwrap();
    assert_eq!(status["op"], "node_status");
    assert_eq!(status["inbox"], 2);
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_input_gets_an_error_and_the_session_stays_open() {
    let swarm = Swarm::start(SwarmOptions {
        n_nodes: 1,
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let mut c = ApiClient::connect(api_for(&swarm, 0).await).await.unwrap();

    c.send_raw("{not json").await.unwrap();
    let e = c.next_message().await.unwrap();
    assert_eq!(e["op"], "error");
    assert!(e["error"].as_str().unwrap().contains("malformed JSON"));

    c.send_raw("[1,2]").await.unwrap();
    assert_eq!(c.next_message().await.unwrap()["op"], "error");

    for bad in [
        json!({"op": "teleport"}),
        json!({"op": "send", "to": "abc", "text": "x"}),
        json!({"op": "send", "to": "11".repeat(32)}),
        json!({"op": "vote", "proposal": "00".repeat(32), "choice": "maybe"}),
        json!({"op": "contact_add", "peer_id": "22".repeat(32), "name": "x", "keys": "zz"}),
    ] {
        match c.call(bad.clone()).await {
            Err(ApiError::Remote(msg)) => assert!(!msg.is_empty(), "{bad}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
    // still usable
    let status = c.call(json!({"op": "status"})).await.unwrap();
    assert_eq!(status["peer_id"], swarm.peer_id(0).to_hex());
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn foreign_origins_are_refused() {
    let swarm = Swarm::start(SwarmOptions {
        n_nodes: 1,
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let addr = api_for(&swarm, 0).await;

    let mut req = format!("ws://{addr}/").into_client_request().unwrap();
    req.headers_mut()
        .insert("Origin", "https://evil.example".parse().unwrap());
    assert!(tokio_tungstenite::connect_async(req).await.is_err());

    let mut req = format!("ws://{addr}/").into_client_request().unwrap();
    req.headers_mut()
        .insert("Origin", "http://localhost:5173".parse().unwrap());
    assert!(tokio_tungstenite::connect_async(req).await.is_ok());

    assert!(api::serve(swarm.node(0).clone(), "0.0.0.0:0".parse().unwrap())
        .await
        .is_err());
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn contacts_and_queued_delivery_through_the_api() {
    let mut swarm = Swarm::start(SwarmOptions {
        n_nodes: 3,
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let bob_id = swarm.peer_id(1);
    let bob_keys = hex::encode(swarm.identity(1).public_keys().encode());
    swarm.stop_node(1).await.unwrap();
    let mut alice = ApiClient::connect(api_for(&swarm, 0).await).await.unwrap();

    let contacts = alice
        .call(json!({"op": "contact_add", "peer_id": bob_id.to_hex(), "name": "bob", "keys": bob_keys}))
        .await
        .unwrap();
    let list = contacts["contacts"].as_array().unwrap();
    assert!(list.iter().any(|c| c["name"] == "bob"));

    let presence = alice
        .call(json!({"op": "presence", "peer": bob_id.to_hex()}))
        .await
        .unwrap();
    assert_eq!(presence["online"], false);

    let r = alice
        .call(json!({"op": "send", "to": bob_id.to_hex(), "text": "later"}))
        .await
        .unwrap();
    assert_eq!(r["state"], "queued");

    swarm.start_node(1).await.unwrap();
    let mut bob = ApiClient::connect(api_for(&swarm, 1).await).await.unwrap();
    let inbox = bob.call(json!({"op": "inbox", "sync": true})).await.unwrap();
    let msgs = inbox["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 1);
    assert_eq!(msgs[0]["text"], "later");
    assert_eq!(msgs[0]["path"], "dmq");
    swarm.shutdown().await;
}
