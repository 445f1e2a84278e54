use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::Result;
use crate::fsio;

/// The resolved configuration of one invocation, echoed to stdout and
/// written next to its outputs.
pub fn render(command: &str, cfg: &Config, extra: &[(&str, String)]) -> String {
    let mut s = format!("# evfuse {}\ncommand={command}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        s.push_str(&format!("{k}={v}\n"));
    }
    s.push_str(&cfg.render());
    s
}

/// `<file>.provenance` for a file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance");
    path.with_file_name(name)
}

pub fn emit(text: &str, path: &Path) -> Result<()> {
    print!("{text}");
    fsio::write_atomic(path, text.as_bytes())
}
