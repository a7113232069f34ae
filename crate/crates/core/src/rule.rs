//! Parameter admissibility rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::model::is_sql_identifier;

/// Request parameters: name to every value carried under that name, in
/// arrival order.
pub type Params = BTreeMap<String, Vec<String>>;

const REGEX_SIZE_LIMIT: usize = 1 << 20;

/// A compiled regular expression that must match the whole value.
#[derive(Clone)]
pub struct RulePattern {
    source: String,
    anchored: Regex,
}

impl RulePattern {
    pub fn new(source: &str) -> Result<Self, RuleError> {
        let anchored = RegexBuilder::new(&format!("^(?:{source})$"))
            .size_limit(REGEX_SIZE_LIMIT)
            .build()
            .map_err(|e| RuleError::InvalidRegex {
                pattern: source.to_string(),
                message: e.to_string(),
            })?;
        Ok(RulePattern {
            source: source.to_string(),
            anchored,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn full_match(&self, value: &str) -> bool {
        self.anchored.is_match(value)
    }
}

impl fmt::Debug for RulePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RulePattern").field(&self.source).finish()
    }
}

impl PartialEq for RulePattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Eq for RulePattern {}

impl Serialize for RulePattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for RulePattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let source = String::deserialize(d)?;
        RulePattern::new(&source).map_err(serde::de::Error::custom)
    }
}

/// Right-hand side of a set-query filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    /// A fixed string.
    Value(String),
    /// The value of another parameter of the same request.
    Param(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetFilter {
    pub column: String,
    #[serde(flatten)]
    pub operand: Operand,
}

/// `value ∈ SELECT column FROM table WHERE f1 = o1 AND ...`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetQueryDef {
    pub table: String,
    pub column: String,
    #[serde(default)]
    pub filters: Vec<SetFilter>,
}

impl SetQueryDef {
    pub fn new(table: &str, column: &str) -> Self {
        SetQueryDef {
            table: table.to_string(),
            column: column.to_string(),
            filters: Vec::new(),
        }
    }

    pub fn filter_value(mut self, column: &str, value: &str) -> Self {
        self.filters.push(SetFilter {
            column: column.to_string(),
            operand: Operand::Value(value.to_string()),
        });
        self
    }

    pub fn filter_param(mut self, column: &str, param: &str) -> Self {
        self.filters.push(SetFilter {
            column: column.to_string(),
            operand: Operand::Param(param.to_string()),
        });
        self
    }

    pub fn check(&self) -> Result<(), RuleError> {
        let bad = std::iter::once(self.table.as_str())
            .chain(std::iter::once(self.column.as_str()))
            .chain(self.filters.iter().map(|f| f.column.as_str()))
            .find(|id| !is_sql_identifier(id));
        match bad {
            Some(id) => Err(RuleError::InvalidSetQuery(format!(
                "`{id}` is not an identifier"
            ))),
            None => Ok(()),
        }
    }
}

/// Admissibility predicate on one request parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamRule {
    /// Exact values. Multi-valued parameters compare as sorted multisets, so
    /// `values` is kept sorted.
    Literal {
        values: Vec<String>,
    },
    Regex {
        pattern: RulePattern,
    },
    #[serde(rename = "set")]
    SetQuery {
        query: SetQueryDef,
    },
    Any,
}

impl ParamRule {
    pub fn literal(value: &str) -> Self {
        ParamRule::Literal {
            values: vec![value.to_string()],
        }
    }

    pub fn literal_multiset<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut values: Vec<String> = values.into_iter().map(Into::into).collect();
        values.sort();
        ParamRule::Literal { values }
    }

    pub fn regex(source: &str) -> Result<Self, RuleError> {
        Ok(ParamRule::Regex {
            pattern: RulePattern::new(source)?,
        })
    }

    pub fn set_query(query: SetQueryDef) -> Result<Self, RuleError> {
        query.check()?;
        Ok(ParamRule::SetQuery { query })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ParamRule::Literal { .. } => "literal",
            ParamRule::Regex { .. } => "regex",
            ParamRule::SetQuery { .. } => "set",
            ParamRule::Any => "any",
        }
    }

    /// Structural checks beyond what the constructors enforce. Rules decoded
    /// from JSON or XML go through here.
    pub fn check(&self) -> Result<(), RuleError> {
        match self {
            ParamRule::Literal { values } if values.is_empty() => Err(RuleError::EmptyLiteral),
            ParamRule::Literal { values } if !values.is_sorted() => Err(RuleError::UnsortedLiteral),
            ParamRule::SetQuery { query } => query.check(),
            _ => Ok(()),
        }
    }
}

/// Loosely typed rule description as submitted by editors. Building it
/// reports precise errors where strict deserialization of [`ParamRule`]
/// would only say "invalid".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<SetQueryDef>,
}

impl RuleSpec {
    pub fn build(self) -> Result<ParamRule, RuleError> {
        match self.kind.as_str() {
            "literal" => {
                let mut values = self.values;
                values.extend(self.value);
                if values.is_empty() {
                    return Err(RuleError::EmptyLiteral);
                }
                Ok(ParamRule::literal_multiset(values))
            }
            "regex" => ParamRule::regex(
                self.pattern
                    .as_deref()
                    .ok_or(RuleError::MissingField("pattern"))?,
            ),
            "set" => ParamRule::set_query(self.query.ok_or(RuleError::MissingField("query"))?),
            "any" => Ok(ParamRule::Any),
            other => Err(RuleError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("unknown rule kind `{0}`")]
    UnknownKind(String),
    #[error("rule is missing `{0}`")]
    MissingField(&'static str),
    #[error("invalid regular expression `{pattern}`: {message}")]
    InvalidRegex { pattern: String, message: String },
    #[error("invalid set query: {0}")]
    InvalidSetQuery(String),
    #[error("literal rule without values")]
    EmptyLiteral,
    #[error("literal rule values must be sorted")]
    UnsortedLiteral,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("host state oracle unavailable: {0}")]
pub struct OracleUnavailable(pub String);

/// Read access to the host application's data, used by set-query rules.
pub trait HostState: Send + Sync {
    /// Returns `column` over all rows of `table` whose `filters` columns equal
    /// the paired values. Unknown tables or columns yield the empty set.
    fn select(
        &self,
        table: &str,
        column: &str,
        filters: &[(&str, &str)],
    ) -> Result<BTreeSet<String>, OracleUnavailable>;
}

/// Evaluates `rule` against one parameter value.
///
/// A set-query filter that references a parameter absent from the request
/// (or carried with several values) makes the rule false.
pub fn eval_param_rule(
    rule: &ParamRule,
    value: &str,
    request: &Params,
    oracle: &dyn HostState,
) -> Result<bool, OracleUnavailable> {
    match rule {
        ParamRule::Literal { values } => Ok(values.len() == 1 && values[0] == value),
        ParamRule::Regex { pattern } => Ok(pattern.full_match(value)),
        ParamRule::Any => Ok(true),
        ParamRule::SetQuery { query } => {
            let mut resolved = Vec::with_capacity(query.filters.len());
            for f in &query.filters {
                let operand = match &f.operand {
                    Operand::Value(v) => v.as_str(),
                    Operand::Param(name) => match request.get(name).map(Vec::as_slice) {
                        Some([single]) => single.as_str(),
                        _ => return Ok(false),
                    },
                };
                resolved.push((f.column.as_str(), operand));
            }
            let set = oracle.select(&query.table, &query.column, &resolved)?;
            Ok(set.contains(value))
        }
    }
}

/// Evaluates `rule` against every value a request carries for one name.
pub fn values_match(
    rule: &ParamRule,
    values: &[String],
    request: &Params,
    oracle: &dyn HostState,
) -> Result<bool, OracleUnavailable> {
    if values.is_empty() {
        return Ok(false);
    }
    if let ParamRule::Literal { values: expected } = rule {
        let mut got: Vec<&str> = values.iter().map(String::as_str).collect();
        got.sort_unstable();
        return Ok(got.len() == expected.len() && got.iter().zip(expected).all(|(a, b)| *a == b));
    }
    for v in values {
        if !eval_param_rule(rule, v, request, oracle)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::oracle::TableSnapshot;

    fn stock() -> TableSnapshot {
        let mut t = TableSnapshot::default();
        t.insert_table(
            "stock",
            &["sku", "qty_min"],
            vec![vec!["A-7", "1"], vec!["B-2", "0"]],
        )
        .unwrap();
        t
    }

    #[test]
    fn regex_and_literal() {
        let empty = TableSnapshot::default();
        let p = Params::new();
        let digits = ParamRule::regex("^[0-9]+$").unwrap();
        assert!(eval_param_rule(&digits, "1234", &p, &empty).unwrap());
        assert!(!eval_param_rule(&digits, "12a", &p, &empty).unwrap());
        assert!(!eval_param_rule(&ParamRule::literal("save"), "delete", &p, &empty).unwrap());
        assert!(eval_param_rule(&ParamRule::literal("save"), "save", &p, &empty).unwrap());
    }

    #[test]
    fn regex_is_full_match() {
        let empty = TableSnapshot::default();
        let p = Params::new();
        let r = ParamRule::regex("[0-9]+").unwrap();
        assert!(!eval_param_rule(&r, "x12", &p, &empty).unwrap());
        let alt = ParamRule::regex("^x|y$").unwrap();
        assert!(eval_param_rule(&alt, "x", &p, &empty).unwrap());
        assert!(eval_param_rule(&alt, "y", &p, &empty).unwrap());
        assert!(!eval_param_rule(&alt, "xy", &p, &empty).unwrap());
    }

    #[test]
    fn invalid_regex_rejected() {
        assert!(matches!(
            ParamRule::regex("(["),
            Err(RuleError::InvalidRegex { .. })
        ));
        // backreferences are outside the supported dialect
        assert!(ParamRule::regex(r"(a)\1").is_err());
    }

    #[test]
    fn set_query_over_stock_fixture() {
        let oracle = stock();
        let p = Params::new();
        let rule =
            ParamRule::set_query(SetQueryDef::new("stock", "sku").filter_value("qty_min", "1"))
                .unwrap();
        assert!(eval_param_rule(&rule, "A-7", &p, &oracle).unwrap());
        assert!(!eval_param_rule(&rule, "B-2", &p, &oracle).unwrap());
    }

    #[test]
    fn set_query_param_reference() {
        let oracle = stock();
        let rule =
            ParamRule::set_query(SetQueryDef::new("stock", "sku").filter_param("qty_min", "q"))
                .unwrap();
        let mut p = Params::new();
        assert!(!eval_param_rule(&rule, "B-2", &p, &oracle).unwrap());
        p.insert("q".into(), vec!["0".into()]);
        assert!(eval_param_rule(&rule, "B-2", &p, &oracle).unwrap());
        p.insert("q".into(), vec!["0".into(), "1".into()]);
        assert!(!eval_param_rule(&rule, "B-2", &p, &oracle).unwrap());
    }

    #[test]
    fn set_query_rejects_bad_identifiers() {
        assert!(matches!(
            ParamRule::set_query(SetQueryDef::new("stock;drop", "sku")),
            Err(RuleError::InvalidSetQuery(_))
        ));
        assert!(ParamRule::set_query(SetQueryDef::new("stock", "1sku")).is_err());
    }

    #[test]
    fn multiset_literal() {
        let empty = TableSnapshot::default();
        let p = Params::new();
        let rule = ParamRule::literal_multiset(["b", "a"]);
        let vals = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(values_match(&rule, &vals(&["a", "b"]), &p, &empty).unwrap());
        assert!(values_match(&rule, &vals(&["b", "a"]), &p, &empty).unwrap());
        assert!(!values_match(&rule, &vals(&["a"]), &p, &empty).unwrap());
        assert!(!values_match(&rule, &vals(&["a", "b", "b"]), &p, &empty).unwrap());
        assert!(!values_match(&ParamRule::Any, &[], &p, &empty).unwrap());
    }

    #[test]
    fn rule_spec_build() {
        let spec = |j| serde_json::from_value::<RuleSpec>(j).unwrap().build();
        assert_eq!(
            spec(serde_json::json!({"kind": "literal", "value": "x"})).unwrap(),
            ParamRule::literal("x")
        );
        assert!(matches!(
            spec(serde_json::json!({"kind": "regex", "pattern": "(["})),
            Err(RuleError::InvalidRegex { .. })
        ));
        assert_eq!(
            spec(serde_json::json!({"kind": "regex"})),
            Err(RuleError::MissingField("pattern"))
        );
        assert!(matches!(
            spec(serde_json::json!({"kind": "set", "query": {"table": "a b", "column": "c"}})),
            Err(RuleError::InvalidSetQuery(_))
        ));
        assert_eq!(
            spec(serde_json::json!({"kind": "any"})).unwrap(),
            ParamRule::Any
        );
        assert!(matches!(
            spec(serde_json::json!({"kind": "sql"})),
            Err(RuleError::UnknownKind(_))
        ));
    }

    #[test]
    fn rule_json_shape() {
        let rule =
            ParamRule::set_query(SetQueryDef::new("stock", "sku").filter_param("owner", "user"))
                .unwrap();
        let json = serde_json::to_value(&rule).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "kind": "set",
                "query": {"table": "stock", "column": "sku",
                          "filters": [{"column": "owner", "param": "user"}]}
            })
        );
        let back: ParamRule = serde_json::from_value(json).unwrap();
        assert_eq!(back, rule);
        let bad: Result<ParamRule, _> =
            serde_json::from_value(serde_json::json!({"kind": "regex", "pattern": "(["}));
        assert!(bad.is_err());
    }

    proptest::proptest! {
        #[test]
        fn any_and_self_literal_always_pass(v in ".{0,16}") {
            let empty = TableSnapshot::default();
            let p = Params::new();
            proptest::prop_assert!(eval_param_rule(&ParamRule::Any, &v, &p, &empty).unwrap());
            proptest::prop_assert!(eval_param_rule(&ParamRule::literal(&v), &v, &p, &empty).unwrap());
        }
    }
}
