//! The resolved run configuration, printed as a command line that replays
//! the run.

use std::fmt::Display;
use std::path::Path;

pub struct Echo {
    words: Vec<String>,
}

fn quote(word: &str) -> String {
    let plain = !word.is_empty()
        && word
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:,=+@%".contains(c));
    if plain {
        word.to_owned()
    } else {
        format!("'{}'", word.replace('\'', r"'\''"))
    }
}

impl Echo {
    pub fn new(command: &str, threads: usize) -> Self {
        let mut e = Echo {
            words: vec!["hanova".into(), command.into()],
        };
        e.opt("--threads", threads);
        e
    }

    pub fn opt(&mut self, flag: &str, value: impl Display) -> &mut Self {
        self.words.push(flag.into());
        self.words.push(value.to_string());
        self
    }

    pub fn path(&mut self, flag: &str, path: &Path) -> &mut Self {
        self.opt(flag, path.display())
    }

    pub fn maybe<T: Display>(&mut self, flag: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.opt(flag, v);
        }
        self
    }

    pub fn list<T: Display>(&mut self, flag: &str, values: &[T]) -> &mut Self {
        let joined = values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        self.opt(flag, joined)
    }

    pub fn flag(&mut self, flag: &str, on: bool) -> &mut Self {
        if on {
            self.words.push(flag.into());
        }
        self
    }

    pub fn print(&self) {
        let line: Vec<String> = self.words.iter().map(|w| quote(w)).collect();
        eprintln!("config: {}", line.join(" "));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        assert_eq!(quote("a/b.csv"), "a/b.csv");
        assert_eq!(quote("0.5,inf"), "0.5,inf");
        assert_eq!(quote("my file"), "'my file'");
        assert_eq!(quote("it's"), r"'it'\''s'");
        assert_eq!(quote(""), "''");
    }
}
