//! The `gatedb` XML document: the single file holding policy and identities.
//!
//! All data lives in attributes. Multi-valued literal rules list their
//! values as `<value v="..."/>` children. The `page` attribute of `<state>`
//! is informational: it is written on export and ignored on import.

use std::collections::{BTreeMap, BTreeSet};

use quick_xml::events::attributes::Attribute;
use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, Event};
use quick_xml::{Reader, Writer};

use crate::credentials::PasswordHash;
use crate::model::{
    Account, AuthMethod, ExclusionSet, GateDb, IdentityRecord, Policy, Role, StateId, TokenBinding,
    Transition, UpstreamCredentials, Workflow,
};
use crate::page::PageId;
use crate::rule::{Operand, ParamRule, SetFilter, SetQueryDef};
use crate::validate::{validate_db, Violation};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImportError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("{path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("dangling references: {}", summarize(.0))]
    DanglingReference(Vec<Violation>),
    #[error("invalid policy: {}", summarize(.0))]
    Invalid(Vec<Violation>),
}

fn summarize(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Node>,
}

impl Node {
    fn new(name: &str) -> Self {
        Node {
            name: name.to_string(),
            ..Node::default()
        }
    }

    fn attr(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attrs.push((key.to_string(), value.into()));
        self
    }

    fn child(mut self, node: Node) -> Self {
        self.children.push(node);
        self
    }
}

// ---------------------------------------------------------------- export

/// Serializes the database. Elements are ordered by id (transitions in
/// their stored order), so equal databases give byte-identical documents.
pub fn export_xml(db: &GateDb) -> Vec<u8> {
    let root = Node::new("gatedb")
        .attr("version", SCHEMA_VERSION)
        .child(Node {
            children: db.policy.workflows.values().map(workflow_node).collect(),
            ..Node::new("workflows")
        })
        .child(Node {
            children: db.policy.roles.values().map(role_node).collect(),
            ..Node::new("roles")
        })
        .child(Node {
            children: db.policy.exclusions.values().map(exclusion_node).collect(),
            ..Node::new("exclusions")
        })
        .child(Node {
            children: db
                .policy
                .accounts
                .values()
                .map(|a| user_node(a, db.identities.get(&a.id)))
                .collect(),
            ..Node::new("users")
        });

    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)))
        .expect("writing to a Vec cannot fail");
    write_node(&mut w, &root);
    let mut out = w.into_inner();
    out.push(b'\n');
    out
}

fn write_node(w: &mut Writer<Vec<u8>>, node: &Node) {
    let mut start = BytesStart::new(node.name.as_str());
    for (k, v) in &node.attrs {
        let escaped = escape_attr(v);
        start.push_attribute(Attribute::from((k.as_bytes(), escaped.as_bytes())));
    }
    let res = if node.children.is_empty() {
        w.write_event(Event::Empty(start))
    } else {
        w.write_event(Event::Start(start)).and_then(|_| {
            for c in &node.children {
                write_node(w, c);
            }
            w.write_event(Event::End(BytesEnd::new(node.name.as_str())))
        })
    };
    res.expect("writing to a Vec cannot fail");
}

/// Markup characters plus whitespace that attribute normalization would
/// otherwise fold into spaces.
fn escape_attr(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\t' => out.push_str("&#9;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

fn workflow_node(wf: &Workflow) -> Node {
    let mut n = Node::new("workflow")
        .attr("id", wf.id.as_str())
        .attr("name", &wf.name)
        .attr("start-state", wf.start_state.as_str())
        .attr("start-page", wf.start_page.to_string());
    for s in &wf.states {
        let mut state = Node::new("state").attr("id", s.as_str());
        let page = if s == &wf.start_state {
            Some(&wf.start_page)
        } else {
            wf.entry_page(s)
        };
        if let Some(p) = page {
            state = state.attr("page", p.to_string());
        }
        n = n.child(state);
    }
    for t in &wf.transitions {
        let mut tn = Node::new("transition")
            .attr("id", t.id.to_string())
            .attr("from", t.from.as_str())
            .attr("to", t.to.as_str())
            .attr("page", t.page.to_string());
        for (name, rule) in &t.params {
            tn = tn.child(param_node(name, rule));
        }
        n = n.child(tn);
    }
    n
}

fn param_node(name: &str, rule: &ParamRule) -> Node {
    let n = Node::new("param")
        .attr("name", name)
        .attr("kind", rule.kind_name());
    match rule {
        ParamRule::Literal { values } if values.len() == 1 => n.attr("value", &values[0]),
        ParamRule::Literal { values } => Node {
            children: values
                .iter()
                .map(|v| Node::new("value").attr("v", v))
                .collect(),
            ..n
        },
        ParamRule::Regex { pattern } => n.attr("value", pattern.source()),
        ParamRule::SetQuery { query } => {
            let mut set = Node::new("set")
                .attr("table", &query.table)
                .attr("column", &query.column);
            for f in &query.filters {
                let filter = Node::new("filter").attr("column", &f.column);
                set = set.child(match &f.operand {
                    Operand::Value(v) => filter.attr("value", v),
                    Operand::Param(p) => filter.attr("param", p),
                });
            }
            n.child(set)
        }
        ParamRule::Any => n,
    }
}

fn role_node(r: &Role) -> Node {
    let mut n = Node::new("role")
        .attr("id", r.id.as_str())
        .attr("name", &r.name);
    for w in &r.workflow_ids {
        n = n.child(Node::new("workflow-ref").attr("id", w.as_str()));
    }
    for m in &r.required_auth {
        n = n.child(Node::new("auth").attr("method", m.as_str()));
    }
    n
}

fn exclusion_node(x: &ExclusionSet) -> Node {
    let mut n = Node::new("exclusion").attr("id", x.id.as_str());
    for w in &x.workflow_ids {
        n = n.child(Node::new("workflow-ref").attr("id", w.as_str()));
    }
    n
}

fn user_node(a: &Account, identity: Option<&IdentityRecord>) -> Node {
    let mut n = Node::new("user")
        .attr("id", a.id.as_str())
        .attr("federated-name", &a.federated_name)
        .attr("idp", &a.idp_id);
    if let Some(i) = identity {
        n = n.child(
            Node::new("password")
                .attr("hash", hex::encode(&i.password.hash))
                .attr("salt", hex::encode(&i.password.salt)),
        );
        if let Some(t) = &i.token {
            n = n.child(
                Node::new("token")
                    .attr("firmcode", &t.firm_code)
                    .attr("usercode", &t.user_code),
            );
        }
    }
    if let Some(u) = &a.upstream {
        n = n.child(
            Node::new("upstream")
                .attr("username", &u.username)
                .attr("secret", &u.secret),
        );
    }
    for r in &a.role_ids {
        n = n.child(Node::new("role-ref").attr("id", r.as_str()));
    }
    n
}

// ---------------------------------------------------------------- import

/// Parses and validates a document. Nothing is returned unless the whole
/// document is well formed, matches the schema and passes validation.
pub fn import_xml(bytes: &[u8]) -> Result<GateDb, ImportError> {
    let root = parse_tree(bytes)?;
    let db = El::root(&root)?.into_db()?;
    let violations = validate_db(&db);
    if violations.is_empty() {
        Ok(db)
    } else if violations.iter().any(Violation::is_dangling) {
        Err(ImportError::DanglingReference(
            violations
                .into_iter()
                .filter(Violation::is_dangling)
                .collect(),
        ))
    } else {
        Err(ImportError::Invalid(violations))
    }
}

fn parse_tree(bytes: &[u8]) -> Result<Node, ImportError> {
    let xml_err = |e: &dyn std::fmt::Display| ImportError::Xml(e.to_string());
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<Node> = Vec::new();
    let mut root: Option<Node> = None;
    let mut buf = Vec::new();

    let open = |e: &BytesStart| -> Result<Node, ImportError> {
        let name = std::str::from_utf8(e.name().as_ref())
            .map_err(|e| xml_err(&e))?
            .to_string();
        let mut attrs = Vec::new();
        for a in e.attributes() {
            let a = a.map_err(|e| xml_err(&e))?;
            let key = std::str::from_utf8(a.key.as_ref())
                .map_err(|e| xml_err(&e))?
                .to_string();
            let value = a.unescape_value().map_err(|e| xml_err(&e))?.into_owned();
            attrs.push((key, value));
        }
        Ok(Node {
            name,
            attrs,
            children: Vec::new(),
        })
    };

    loop {
        let ev = reader.read_event_into(&mut buf).map_err(|e| xml_err(&e))?;
        let finished = match ev {
            Event::Start(e) => {
                if root.is_some() {
                    return Err(ImportError::Xml("content after the root element".into()));
                }
                stack.push(open(&e)?);
                None
            }
            Event::Empty(e) => Some(open(&e)?),
            Event::End(_) => stack.pop(),
            Event::Text(t) => {
                let raw = String::from_utf8_lossy(t.as_ref()).into_owned();
                return Err(text_error(&stack, &raw));
            }
            Event::GeneralRef(_) | Event::CData(_) => return Err(text_error(&stack, "")),
            Event::DocType(_) => {
                return Err(ImportError::Xml(
                    "document type declarations are not accepted".into(),
                ))
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) => None,
            Event::Eof => break,
        };
        if let Some(node) = finished {
            match stack.last_mut() {
                Some(parent) => parent.children.push(node),
                None if root.is_none() => root = Some(node),
                None => return Err(ImportError::Xml("more than one root element".into())),
            }
        }
        buf.clear();
    }
    if !stack.is_empty() {
        return Err(ImportError::Xml("unexpected end of document".into()));
    }
    root.ok_or_else(|| ImportError::Xml("empty document".into()))
}

fn text_error(stack: &[Node], raw: &str) -> ImportError {
    let path: String = stack.iter().map(|n| format!("/{}", n.name)).collect();
    ImportError::SchemaViolation {
        path: if path.is_empty() { "/".into() } else { path },
        message: format!("unexpected text content {:?}", raw.trim()),
    }
}

/// A node together with its location, for error reporting.
struct El<'a> {
    node: &'a Node,
    path: String,
}

impl<'a> El<'a> {
    fn root(node: &'a Node) -> Result<Self, ImportError> {
        let el = El {
            node,
            path: format!("/{}", node.name),
        };
        if node.name != "gatedb" {
            return Err(el.violation("expected root element <gatedb>"));
        }
        Ok(el)
    }

    fn violation(&self, message: impl Into<String>) -> ImportError {
        ImportError::SchemaViolation {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    fn opt(&self, key: &str) -> Option<&'a str> {
        self.node
            .attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn req(&self, key: &str) -> Result<&'a str, ImportError> {
        self.opt(key)
            .ok_or_else(|| self.violation(format!("missing attribute `{key}`")))
    }

    /// Rejects attributes outside `allowed` and children outside `children`.
    fn shape(&self, allowed: &[&str], children: &[&str]) -> Result<(), ImportError> {
        if let Some((k, _)) = self
            .node
            .attrs
            .iter()
            .find(|(k, _)| !allowed.contains(&k.as_str()))
        {
            return Err(self.violation(format!("unexpected attribute `{k}`")));
        }
        if let Some(c) = self
            .node
            .children
            .iter()
            .find(|c| !children.contains(&c.name.as_str()))
        {
            return Err(self.violation(format!("unexpected element <{}>", c.name)));
        }
        Ok(())
    }

    fn children(&self, name: &'a str) -> impl Iterator<Item = El<'a>> + 'a {
        let base = self.path.clone();
        self.node
            .children
            .iter()
            .filter(move |c| c.name == name)
            .enumerate()
            .map(move |(i, c)| El {
                node: c,
                path: format!("{base}/{name}[{}]", i + 1),
            })
    }

    fn at_most_one(&self, name: &'a str) -> Result<Option<El<'a>>, ImportError> {
        let mut it = self.children(name);
        let first = it.next();
        if it.next().is_some() {
            return Err(self.violation(format!("more than one <{name}>")));
        }
        Ok(first)
    }

    fn exactly_one(&self, name: &'a str) -> Result<El<'a>, ImportError> {
        self.at_most_one(name)?
            .ok_or_else(|| self.violation(format!("missing <{name}>")))
    }

    fn section(&self, name: &'a str, item: &[&str]) -> Result<El<'a>, ImportError> {
        let s = El {
            node: self.exactly_one(name)?.node,
            path: format!("{}/{name}", self.path),
        };
        s.shape(&[], item)?;
        Ok(s)
    }

    fn page(&self, key: &str) -> Result<PageId, ImportError> {
        self.req(key)?
            .parse()
            .map_err(|e| self.violation(format!("attribute `{key}`: {e}")))
    }

    fn into_db(self) -> Result<GateDb, ImportError> {
        self.shape(&["version"], &["workflows", "roles", "exclusions", "users"])?;
        let version = self.req("version")?;
        if version != SCHEMA_VERSION {
            return Err(self.violation(format!("unsupported version `{version}`")));
        }
        let mut db = GateDb::default();

        for w in self
            .section("workflows", &["workflow"])?
            .children("workflow")
        {
            let wf = w.workflow()?;
            if db.policy.workflows.insert(wf.id.clone(), wf).is_some() {
                return Err(w.violation("duplicate workflow id"));
            }
        }
        for r in self.section("roles", &["role"])?.children("role") {
            let role = r.role()?;
            if db.policy.roles.insert(role.id.clone(), role).is_some() {
                return Err(r.violation("duplicate role id"));
            }
        }
        for x in self
            .section("exclusions", &["exclusion"])?
            .children("exclusion")
        {
            x.shape(&["id"], &["workflow-ref"])?;
            let set = ExclusionSet {
                id: x.req("id")?.into(),
                workflow_ids: x.refs("workflow-ref")?,
            };
            if db.policy.exclusions.insert(set.id.clone(), set).is_some() {
                return Err(x.violation("duplicate exclusion id"));
            }
        }
        for u in self.section("users", &["user"])?.children("user") {
            let (account, identity) = u.user()?;
            if db.policy.accounts.contains_key(&account.id) {
                return Err(u.violation("duplicate user id"));
            }
            if let Some(i) = identity {
                db.identities.insert(i.user_id.clone(), i);
            }
            db.policy.accounts.insert(account.id.clone(), account);
        }
        Ok(db)
    }

    fn refs<T: Ord + From<&'a str>>(&self, name: &'a str) -> Result<BTreeSet<T>, ImportError> {
        let mut out = BTreeSet::new();
        for r in self.children(name) {
            r.shape(&["id"], &[])?;
            if !out.insert(T::from(r.req("id")?)) {
                return Err(r.violation("duplicate reference"));
            }
        }
        Ok(out)
    }

    fn workflow(&self) -> Result<Workflow, ImportError> {
        self.shape(
            &["id", "name", "start-state", "start-page"],
            &["state", "transition"],
        )?;
        let mut states = BTreeSet::new();
        for s in self.children("state") {
            s.shape(&["id", "page"], &[])?;
            if !states.insert(StateId::from(s.req("id")?)) {
                return Err(s.violation("duplicate state id"));
            }
        }
        let mut transitions = Vec::new();
        for t in self.children("transition") {
            t.shape(&["id", "from", "to", "page"], &["param"])?;
            let id = t
                .req("id")?
                .parse::<u32>()
                .map_err(|e| t.violation(format!("attribute `id`: {e}")))?;
            let mut params = BTreeMap::new();
            for p in t.children("param") {
                let name = p.req("name")?;
                if params.insert(name.to_string(), p.rule()?).is_some() {
                    return Err(p.violation(format!("duplicate param `{name}`")));
                }
            }
            transitions.push(Transition {
                id,
                from: t.req("from")?.into(),
                to: t.req("to")?.into(),
                page: t.page("page")?,
                params,
            });
        }
        Ok(Workflow {
            id: self.req("id")?.into(),
            name: self.req("name")?.to_string(),
            states,
            start_state: self.req("start-state")?.into(),
            start_page: self.page("start-page")?,
            transitions,
        })
    }

    fn rule(&self) -> Result<ParamRule, ImportError> {
        let kind = self.req("kind")?;
        let bad = |e: &dyn std::fmt::Display| self.violation(e.to_string());
        let rule = match kind {
            "literal" => {
                self.shape(&["name", "kind", "value"], &["value"])?;
                let mut values: Vec<String> =
                    self.opt("value").map(str::to_string).into_iter().collect();
                for v in self.children("value") {
                    v.shape(&["v"], &[])?;
                    values.push(v.req("v")?.to_string());
                }
                if values.is_empty() {
                    return Err(self.violation("literal rule without values"));
                }
                ParamRule::literal_multiset(values)
            }
            "regex" => {
                self.shape(&["name", "kind", "value"], &[])?;
                ParamRule::regex(self.req("value")?).map_err(|e| bad(&e))?
            }
            "set" => {
                self.shape(&["name", "kind"], &["set"])?;
                let s = self.exactly_one("set")?;
                s.shape(&["table", "column"], &["filter"])?;
                let mut query = SetQueryDef::new(s.req("table")?, s.req("column")?);
                for f in s.children("filter") {
                    f.shape(&["column", "value", "param"], &[])?;
                    let operand = match (f.opt("value"), f.opt("param")) {
                        (Some(v), None) => Operand::Value(v.to_string()),
                        (None, Some(p)) => Operand::Param(p.to_string()),
                        _ => {
                            return Err(
                                f.violation("filter needs exactly one of `value` or `param`")
                            )
                        }
                    };
                    query.filters.push(SetFilter {
                        column: f.req("column")?.to_string(),
                        operand,
                    });
                }
                ParamRule::set_query(query).map_err(|e| s.violation(e.to_string()))?
            }
            "any" => {
                self.shape(&["name", "kind"], &[])?;
                ParamRule::Any
            }
            other => return Err(self.violation(format!("unknown rule kind `{other}`"))),
        };
        Ok(rule)
    }

    fn role(&self) -> Result<Role, ImportError> {
        self.shape(&["id", "name"], &["workflow-ref", "auth"])?;
        let mut required_auth = BTreeSet::new();
        for a in self.children("auth") {
            a.shape(&["method"], &[])?;
            let m = a.req("method")?;
            let method = AuthMethod::parse(m)
                .ok_or_else(|| a.violation(format!("unknown auth method `{m}`")))?;
            if !required_auth.insert(method) {
                return Err(a.violation("duplicate auth method"));
            }
        }
        Ok(Role {
            id: self.req("id")?.into(),
            name: self.req("name")?.to_string(),
            workflow_ids: self.refs("workflow-ref")?,
            required_auth,
        })
    }

    fn user(&self) -> Result<(Account, Option<IdentityRecord>), ImportError> {
        self.shape(
            &["id", "federated-name", "idp"],
            &["password", "token", "upstream", "role-ref"],
        )?;
        let account = Account {
            id: self.req("id")?.into(),
            federated_name: self.req("federated-name")?.to_string(),
            role_ids: self.refs("role-ref")?,
            idp_id: self.req("idp")?.to_string(),
            upstream: match self.at_most_one("upstream")? {
                Some(u) => {
                    u.shape(&["username", "secret"], &[])?;
                    Some(UpstreamCredentials {
                        username: u.req("username")?.to_string(),
                        secret: u.req("secret")?.to_string(),
                    })
                }
                None => None,
            },
        };
        let token = match self.at_most_one("token")? {
            Some(t) => {
                t.shape(&["firmcode", "usercode"], &[])?;
                Some(TokenBinding {
                    firm_code: t.req("firmcode")?.to_string(),
                    user_code: t.req("usercode")?.to_string(),
                })
            }
            None => None,
        };
        let identity = match self.at_most_one("password")? {
            Some(p) => {
                p.shape(&["hash", "salt"], &[])?;
                let hex_attr = |k: &str| {
                    hex::decode(p.req(k)?).map_err(|e| p.violation(format!("attribute `{k}`: {e}")))
                };
                Some(IdentityRecord {
                    user_id: account.id.clone(),
                    federated_name: account.federated_name.clone(),
                    password: PasswordHash {
                        hash: hex_attr("hash")?,
                        salt: hex_attr("salt")?,
                    },
                    token,
                })
            }
            None if token.is_some() => {
                return Err(self.violation("<token> without <password>"));
            }
            None => None,
        };
        Ok((account, identity))
    }
}

/// Convenience wrapper for callers that only hold a policy.
pub fn export_policy_xml(policy: &Policy) -> Vec<u8> {
    export_xml(&GateDb {
        policy: policy.clone(),
        identities: BTreeMap::new(),
    })
}
