use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Lt => "<",
            Relation::Ge => ">=",
            Relation::Gt => ">",
        })
    }
}

/// One evaluated inequality `lhs <rel> rhs`. `slack` is positive when the
/// inequality holds with room to spare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    #[serde(with = "num")]
    pub lhs: f64,
    pub relation: Relation,
    #[serde(with = "num")]
    pub rhs: f64,
    #[serde(with = "num")]
    pub slack: f64,
    pub pass: bool,
    /// Set when the condition depends on a floored Lipschitz constant and
    /// therefore carries no information.
    #[serde(default)]
    pub vacuous: bool,
}

impl Condition {
    pub fn new(name: impl Into<String>, lhs: f64, relation: Relation, rhs: f64) -> Self {
        let (slack, pass) = match relation {
            Relation::Le => (rhs - lhs, lhs <= rhs),
            Relation::Lt => (rhs - lhs, lhs < rhs),
            Relation::Ge => (lhs - rhs, lhs >= rhs),
            Relation::Gt => (lhs - rhs, lhs > rhs),
        };
        Condition {
            name: name.into(),
            lhs,
            relation,
            rhs,
            // inf - inf
            slack: if slack.is_nan() { 0.0 } else { slack },
            pass,
            vacuous: false,
        }
    }

    pub fn vacuous(mut self, vacuous: bool) -> Self {
        self.vacuous = vacuous;
        self
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: LHS={} RHS={} slack={} [{}]",
            self.name,
            fmt_num(self.lhs),
            fmt_num(self.rhs),
            fmt_num(self.slack),
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        if self.vacuous {
            write!(f, " (vacuous)")?;
        }
        Ok(())
    }
}

/// Shortest round-trip representation.
pub fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

/// Serde adapter for floats that may be infinite: finite values are plain
/// numbers, others the strings `inf`, `-inf` and `nan`.
pub mod num {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_num(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" | "NaN" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }

    /// The same encoding for optional values.
    pub mod opt {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] f64);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}
