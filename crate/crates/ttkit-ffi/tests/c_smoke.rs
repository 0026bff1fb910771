//! Compile and run a small C program against the generated header and the
//! static library, proving the ABI end to end.

use std::path::PathBuf;
use std::process::Command;

const C_PROGRAM: &str = r#"
#include <assert.h>
#include <stdio.h>
#include <string.h>
#include "ttkit.h"

static const char *RECORD =
    "{\"task\":{\"env_id\":\"e\",\"tools\":[\"bash\"],"
    "\"scaffold\":{\"name\":\"s\",\"system_prompt\":\"p\"},"
    "\"instruction\":\"do\",\"verifier_id\":\"v\"},\"vocab_size\":16,"
    "\"calls\":[{\"call_id\":\"a\",\"tokens\":[1,2,3,4],\"origins\":[1,1,1,1],"
    "\"logprobs\":[-0.1,-0.2,-0.3,-0.4],"
    "\"turns\":[{\"start\":0,\"end\":2,\"role\":\"Assistant\"},"
    "{\"start\":2,\"end\":4,\"role\":\"Assistant\"}]},"
    "{\"call_id\":\"b\",\"tokens\":[1,2,7],\"origins\":[1,1,1],"
    "\"logprobs\":[-0.1,-0.2,-0.7],"
    "\"turns\":[{\"start\":0,\"end\":2,\"role\":\"Assistant\"},"
    "{\"start\":2,\"end\":3,\"role\":\"Assistant\"}]}],"
    "\"rewards\":[1.0,0.0]}";

int main(void) {
    TtkTree *tree = NULL;
    TtkStatus status =
        ttk_tree_from_record_json((const uint8_t *)RECORD, strlen(RECORD), true, &tree);
    assert(status == TtkStatus_Ok);

    TtkTreeStats stats;
    assert(ttk_tree_stats(tree, &stats) == TtkStatus_Ok);
    assert(stats.tree_tokens == 5);
    assert(stats.linear_tokens == 7);

    TtkBatch *batch = NULL;
    assert(ttk_batch_pack(tree, 0, &batch) == TtkStatus_Ok);
    uint64_t len = 0;
    assert(ttk_batch_len(batch, &len) == TtkStatus_Ok);
    assert(len == 5);

    uint32_t ids[5];
    double weights[5];
    assert(ttk_batch_token_ids(batch, ids, 5) == TtkStatus_Ok);
    assert(ttk_batch_loss_weights(batch, weights, 5) == TtkStatus_Ok);
    assert(ids[0] == 1 && ids[4] == 7);
    assert(weights[0] == 2.0 && weights[4] == 1.0);

    bool attends = true;
    assert(ttk_batch_attends(batch, 4, 2, &attends) == TtkStatus_Ok && !attends);
    assert(ttk_batch_attends(batch, 4, 0, &attends) == TtkStatus_Ok && attends);

    uint8_t *bytes = NULL;
    uintptr_t blen = 0;
    assert(ttk_batch_to_bytes(batch, &bytes, &blen) == TtkStatus_Ok);
    assert(blen > 4 && bytes[0] == 'T' && bytes[1] == 'T' && bytes[2] == 'K' && bytes[3] == '1');
    TtkBatch *reloaded = NULL;
    assert(ttk_batch_from_bytes(bytes, blen, &reloaded) == TtkStatus_Ok);
    ttk_bytes_free(bytes, blen);

    TtkPassAtK decision;
    assert(ttk_pass_at_k(3, 8, &decision) == TtkStatus_Ok);
    assert(decision.retained && decision.r_hat == 0.375);

    double w = 0.0;
    assert(ttk_importance_weight(-1.0, -1.0, &w) == TtkStatus_Ok && w == 1.0);

    // Error path: message must be retrievable.
    TtkTree *bad = NULL;
    assert(ttk_tree_from_record_json((const uint8_t *)"nope", 4, true, &bad) ==
           TtkStatus_ParseError);
    char msg[256];
    assert(ttk_last_error(msg, sizeof msg) > 0);

    ttk_batch_free(reloaded);
    ttk_batch_free(batch);
    ttk_tree_free(tree);
    printf("c smoke ok: %s\n", ttk_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest.join("include");
    assert!(include_dir.join("ttkit.h").exists(), "cbindgen header missing");

    // The staticlib sits in target/debug/deps during test runs and is only
    // uplifted to target/debug by plain builds; accept either location.
    let mut exe_dir = std::env::current_exe().unwrap();
    exe_dir.pop(); // test binary name
    let candidates = [
        exe_dir.join("libttkit_ffi.a"),
        exe_dir.parent().unwrap().join("libttkit_ffi.a"),
        exe_dir.parent().unwrap().join("deps").join("libttkit_ffi.a"),
    ];
    let static_lib = candidates
        .iter()
        .find(|p| p.exists())
        .unwrap_or_else(|| panic!("static library not found near {}", exe_dir.display()))
        .clone();

    let dir = tempfile::tempdir().unwrap();
    let c_path = dir.path().join("smoke.c");
    let bin_path = dir.path().join("smoke");
    std::fs::write(&c_path, C_PROGRAM).unwrap();

    let compile = Command::new("cc")
        .arg(&c_path)
        .arg(&static_lib)
        .arg("-I")
        .arg(&include_dir)
        .arg("-lpthread")
        .arg("-ldl")
        .arg("-lm")
        .arg("-o")
        .arg(&bin_path)
        .output()
        .expect("cc must be installed");
    assert!(
        compile.status.success(),
        "cc failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&bin_path).output().unwrap();
    assert!(
        run.status.success(),
        "smoke binary failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("c smoke ok"));
}
