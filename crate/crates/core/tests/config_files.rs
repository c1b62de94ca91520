use fybrr_core::crypto::PeerIdentity;
use fybrr_core::node::{ConfigError, Node, NodeConfig};

#[test]
fn malformed_key_files_are_rejected_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let good = PeerIdentity::generate().to_key_file();
    let (header, body) = good.trim().split_once('\n').unwrap();
    let short = format!("{header}\n{}\n", &body[..64]);
    // flip one hex digit of the stored encryption public key
    let mut flipped = body.to_string().into_bytes();
    flipped[64] = if flipped[64] == b'0' { b'1' } else { b'0' };
    let mismatched = format!("{header}\n{}\n", String::from_utf8(flipped).unwrap());
    for (name, text) in [
        ("empty.key", String::new()),
        ("garbage.key", "not a key file at all".to_string()),
        ("headerless.key", format!("{body}\n")),
        ("short.key", short),
        ("mismatched.key", mismatched),
        ("trailing.key", format!("{good}extra\n")),
    ] {
        std::fs::write(dir.path().join(name), text).unwrap();
        let cfg = format!("key_file={name}\nlisten=127.0.0.1:0\n");
        match NodeConfig::parse(&cfg, dir.path()) {
            Err(ConfigError::KeyFile(msg)) => assert!(msg.contains(name), "{msg}"),
            other => panic!("{name}: {other:?}"),
        }
    }
    let missing = NodeConfig::parse("key_file=nope.key\nlisten=127.0.0.1:0\n", dir.path());
    assert!(matches!(missing, Err(ConfigError::KeyFile(_))));
}

#[tokio::test]
async fn a_saved_identity_starts_a_node_with_the_same_peer_id() {
    let dir = tempfile::tempdir().unwrap();
    let id = PeerIdentity::generate();
    id.save(dir.path().join("me.key")).unwrap();
    std::fs::write(
        dir.path().join("node.conf"),
        "# test node\nkey_file = me.key\nlisten = 127.0.0.1:0\napi_port = 0\ndata_dir = state\n",
    )
    .unwrap();
    let cfg = NodeConfig::load(dir.path().join("node.conf")).unwrap();
    assert_eq!(cfg.api_port, None);
    let node = Node::start(cfg).await.unwrap();
    assert_eq!(node.peer_id(), id.peer_id());
    assert!(dir.path().join("state").is_dir());
    node.shutdown().await;
}
