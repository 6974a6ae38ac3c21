#![no_main]

use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};
use tabforge::container::{latents_from_container, Container, DiffusionArtifact, VaeArtifact};

const MAGIC: &[u8] = b"TSYN1";
const DIGEST_LEN: usize = 32;

fn exercise(data: &[u8]) {
    let Ok(container) = Container::decode(data) else {
        return;
    };
    let bytes = container.encode().expect("decoded container re-encodes");
    let again = Container::decode(&bytes).expect("re-encoded container decodes");
    assert_eq!(again.encode().expect("container re-encodes"), bytes);
    let _ = VaeArtifact::from_container(&container);
    let _ = DiffusionArtifact::from_container(&container);
    let _ = latents_from_container(&container);
}

fuzz_target!(|data: &[u8]| {
    exercise(data);

    // Same body with a valid digest, so mutations reach the block parser.
    let mut framed = MAGIC.to_vec();
    framed.extend_from_slice(data.get(MAGIC.len()..).unwrap_or_default());
    let body_end = framed.len().saturating_sub(DIGEST_LEN).max(MAGIC.len());
    framed.truncate(body_end);
    let digest = Sha256::digest(&framed[MAGIC.len()..]);
    framed.extend_from_slice(&digest);
    exercise(&framed);
});
