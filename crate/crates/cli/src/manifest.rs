//! `manifest.txt`: tool version, the exact command line, seed and thread
//! count as `#` comments, followed by the full config in `key = value` form.
//! For `train`, `bench` and `gradcheck` the file is itself a valid
//! `--config`, so a run replays from its manifest alone.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

pub const FILE_NAME: &str = "manifest.txt";

pub struct Manifest<'a> {
    pub subcommand: &'a str,
    pub seed: u64,
    pub threads: usize,
    /// Extra `# key: value` lines, such as the checkpoint an eval used.
    pub notes: Vec<(&'a str, String)>,
    pub config: String,
}

/// Shell-style rendering of the process arguments; arguments containing
/// whitespace or quotes are single-quoted.
fn command_line() -> String {
    std::env::args()
        .map(|a| {
            if a.is_empty() || a.contains(|c: char| c.is_whitespace() || c == '\'' || c == '"') {
                format!("'{}'", a.replace('\'', r"'\''"))
            } else {
                a
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl Manifest<'_> {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# cumamba {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "# command: {}", command_line());
        let _ = writeln!(out, "# subcommand: {}", self.subcommand);
        let _ = writeln!(out, "# seed: {}", self.seed);
        let _ = writeln!(out, "# threads: {}", self.threads);
        for (k, v) in &self.notes {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str(&self.config);
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.render()).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
    }
}
