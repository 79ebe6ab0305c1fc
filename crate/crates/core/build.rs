use std::process::Command;

fn main() {
    let id = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    if let Some(id) = id {
        println!("cargo:rustc-env=HRST_BUILD_ID={id}");
    }
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
