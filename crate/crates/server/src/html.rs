//! HTML produced or altered by the gateway: response rewriting, the
//! presence script and error pages.

use regex::bytes::{Captures, Regex};

use crate::config::GatewayConfig;

pub const BEACON_PATH: &str = "/__gate/beacon.js";

pub fn is_html(content_type: Option<&str>) -> bool {
    content_type.is_some_and(|ct| {
        let ct = ct.trim_start().to_ascii_lowercase();
        ct.starts_with("text/html") || ct.starts_with("application/xhtml+xml")
    })
}

/// Applies the configured rewrites to an HTML body. Other content types
/// are returned unchanged.
pub fn rewrite_html(body: &[u8], content_type: Option<&str>, cfg: &GatewayConfig) -> Vec<u8> {
    if !is_html(content_type) {
        return body.to_vec();
    }
    let mut out = body.to_vec();
    if cfg.rewrite.rewrite_origin_links {
        out = rewrite_origin_links(&out, &cfg.upstream_base(), &cfg.public_base());
    }
    if cfg.rewrite.inject_beacon {
        out = inject_before_body_end(&out, beacon_tag().as_bytes());
    }
    out
}

pub fn beacon_tag() -> String {
    format!("<script src=\"{BEACON_PATH}\" defer></script>")
}

/// Rewrites `href`, `src`, `action` and `formaction` values that point at
/// `upstream` so they point at `public` (or become root-relative when
/// `public` is empty).
pub fn rewrite_origin_links(body: &[u8], upstream: &str, public: &str) -> Vec<u8> {
    let re = Regex::new(&format!(
        r#"(?i)(\b(?:href|src|action|formaction)\s*=\s*["']?){}([/"'?#\s>]|$)"#,
        regex::escape(upstream)
    ))
    .expect("escaped origin forms a valid pattern");
    re.replace_all(body, |c: &Captures| {
        let mut v = c[1].to_vec();
        v.extend_from_slice(public.as_bytes());
        let end = &c[2];
        if public.is_empty() && end.first() != Some(&b'/') {
            v.push(b'/');
        }
        v.extend_from_slice(end);
        v
    })
    .into_owned()
}

/// Inserts `snippet` before the last `</body` (any case), or appends it.
pub fn inject_before_body_end(body: &[u8], snippet: &[u8]) -> Vec<u8> {
    let needle = b"</body";
    let pos = body
        .windows(needle.len())
        .rposition(|w| w.eq_ignore_ascii_case(needle))
        .unwrap_or(body.len());
    let mut out = Vec::with_capacity(body.len() + snippet.len());
    out.extend_from_slice(&body[..pos]);
    out.extend_from_slice(snippet);
    out.extend_from_slice(&body[pos..]);
    out
}

pub fn beacon_script(period_secs: i64, token_probe: Option<&str>) -> String {
    let probe = serde_json::to_string(&token_probe).expect("strings serialize");
    format!(
        r#"(function () {{
  var period = {ms};
  var probe = {probe};
  var active = false;
  ["mousemove", "mousedown", "keydown", "scroll", "touchstart"].forEach(function (e) {{
    document.addEventListener(e, function () {{ active = true; }}, {{ passive: true }});
  }});
  function tokenPresent() {{
    if (!probe) return Promise.resolve(false);
    return fetch(probe, {{ cache: "no-store" }})
      .then(function (r) {{ return r.ok ? r.text() : "0"; }})
      .then(function (t) {{ return t.trim() === "1"; }})
      .catch(function () {{ return false; }});
  }}
  var timer;
  function beat() {{
    tokenPresent().then(function (token) {{
      var body = "active=" + (active ? 1 : 0) + "&token=" + (token ? 1 : 0);
      active = false;
      return fetch("/__gate/beacon", {{
        method: "POST",
        credentials: "same-origin",
        headers: {{ "Content-Type": "application/x-www-form-urlencoded" }},
        body: body
      }});
    }}).then(function (r) {{
      if (r.status === 410) {{ clearInterval(timer); location.reload(); return ""; }}
      return r.text();
    }}).then(function (s) {{
      if (s) document.documentElement.setAttribute("data-gate-presence", s.trim());
    }}).catch(function () {{}});
  }}
  timer = setInterval(beat, period);
  beat();
}})();
"#,
        ms = period_secs * 1000,
    )
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title></head>\n<body>\n<h1>{t}</h1>\n{body}\n</body></html>\n",
        t = escape(title)
    )
}

/// The page shown when the monitor refuses a request.
pub fn deny_page(reason: &str, fallback: Option<&str>) -> String {
    let mut body = format!(
        "<!-- gate:deny reason={reason} -->\n<p>The requested page is not part of any workflow you are currently allowed to perform ({reason}).</p>\n<ul>\n<li><a id=\"gate-retry\" href=\"javascript:history.back()\">Go back and retry</a></li>\n",
        reason = escape(reason)
    );
    if let Some(f) = fallback {
        body.push_str(&format!(
            "<li><a id=\"gate-fallback\" href=\"{}\">Go to the start page</a></li>\n",
            escape(f)
        ));
    }
    body.push_str("</ul>");
    page("Access denied", &body)
}
