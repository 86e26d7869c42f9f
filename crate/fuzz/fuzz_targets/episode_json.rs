#![no_main]

use libfuzzer_sys::fuzz_target;
use p2d_core::scene::{episode_from_json, episode_to_json};

fuzz_target!(|data: &[u8]| {
    // Anything accepted must serialize and parse back to the same episode.
    if let Ok(ep) = episode_from_json(data) {
        let bytes = episode_to_json(&ep).expect("parsed episodes serialize");
        let again = episode_from_json(&bytes).expect("serialized episodes parse");
        assert_eq!(again.frames.len(), ep.frames.len());
    }
});
