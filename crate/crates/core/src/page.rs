//! Request targets as seen by the reference monitor.
//!
//! A page is the pair of HTTP method and normalized path. Normalization
//! decodes percent-encoded unreserved characters, upper-cases the hex digits
//! of every remaining escape, removes dot segments and strips the trailing
//! slash, so that every textual spelling of one resource maps to one key.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = PageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Ok(Method::Get),
            "POST" => Ok(Method::Post),
            _ => Err(PageError::UnsupportedMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PageError {
    #[error("unsupported method `{0}`, only GET and POST are intercepted")]
    UnsupportedMethod(String),
    #[error("malformed page `{0}`, expected `<METHOD> <path>`")]
    Malformed(String),
}

/// A normalized `(method, path)` request target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PageId {
    method: Method,
    path: String,
}

impl PageId {
    /// Builds a page from a raw request target. Any query string or fragment
    /// is dropped.
    pub fn new(method: Method, raw_target: &str) -> Self {
        PageId {
            method,
            path: normalize_path(raw_target),
        }
    }

    pub fn get(raw_target: &str) -> Self {
        Self::new(Method::Get, raw_target)
    }

    pub fn post(raw_target: &str) -> Self {
        Self::new(Method::Post, raw_target)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.method, self.path)
    }
}

impl FromStr for PageId {
    type Err = PageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (method, path) = s
            .trim()
            .split_once(' ')
            .ok_or_else(|| PageError::Malformed(s.to_string()))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(PageError::Malformed(s.to_string()));
        }
        Ok(PageId::new(method.parse()?, path))
    }
}

impl TryFrom<String> for PageId {
    type Error = PageError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<PageId> for String {
    fn from(page: PageId) -> Self {
        page.to_string()
    }
}

/// Paths served by the gateway itself rather than the host application.
pub fn is_gateway_internal(path: &str) -> bool {
    let under = |prefix: &str| {
        path == prefix
            || path
                .strip_prefix(prefix)
                .is_some_and(|rest| rest.starts_with('/'))
    };
    under("/__gate") || under("/admin")
}

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~')
}

fn hex_val(b: u8) -> Option<u8> {
    (b as char).to_digit(16).map(|d| d as u8)
}

/// Normalizes the path component of a request target.
pub fn normalize_path(raw: &str) -> String {
    let end = raw.find(['?', '#']).unwrap_or(raw.len());
    let raw = &raw[..end];

    // Decode escapes of unreserved characters; canonicalize the rest. Reserved
    // characters such as `/` stay encoded so decoding never changes the segment
    // structure and a second pass is the identity.
    let bytes = raw.as_bytes();
    let mut decoded = String::with_capacity(raw.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'%' && i + 2 < bytes.len() {
            if let (Some(h), Some(l)) = (hex_val(bytes[i + 1]), hex_val(bytes[i + 2])) {
                let v = h * 16 + l;
                if is_unreserved(v) {
                    decoded.push(v as char);
                } else {
                    decoded.push('%');
                    decoded.push(bytes[i + 1].to_ascii_uppercase() as char);
                    decoded.push(bytes[i + 2].to_ascii_uppercase() as char);
                }
                i += 3;
                continue;
            }
        }
        if b == b'%' {
            // A stray percent sign is itself encoded so it cannot later combine
            // with following characters into a new escape.
            decoded.push_str("%25");
            i += 1;
            continue;
        }
        if b.is_ascii() && !b.is_ascii_control() && b != b' ' {
            decoded.push(b as char);
            i += 1;
        } else {
            // Raw non-ASCII or control bytes are percent-encoded. The input is a
            // &str so multi-byte sequences are valid UTF-8.
            let ch = raw[i..].chars().next().expect("char boundary");
            let mut buf = [0u8; 4];
            for byte in ch.encode_utf8(&mut buf).bytes() {
                decoded.push_str(&format!("%{byte:02X}"));
            }
            i += ch.len_utf8();
        }
    }

    let mut segments: Vec<&str> = Vec::new();
    for seg in decoded.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                segments.pop();
            }
            s => segments.push(s),
        }
    }
    if segments.is_empty() {
        "/".to_string()
    } else {
        let mut out = String::with_capacity(decoded.len());
        for seg in segments {
            out.push('/');
            out.push_str(seg);
        }
        out
    }
}
