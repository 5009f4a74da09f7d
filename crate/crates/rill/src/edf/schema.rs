//! Schema types. An EDF schema is fixed for the lifetime of the frame
//! (the consistency property): operators derive new schemas, but no state
//! transition ever alters one.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Int64,
    Float64,
    Utf8,
}

impl ValueKind {
    pub fn name(self) -> &'static str {
        match self {
            ValueKind::Int64 => "int64",
            ValueKind::Float64 => "float64",
            ValueKind::Utf8 => "utf8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "int64" => Ok(ValueKind::Int64),
            "float64" => Ok(ValueKind::Float64),
            "utf8" => Ok(ValueKind::Utf8),
            other => Err(Error::Schema(format!("unknown value kind `{other}`"))),
        }
    }
}

/// Constant attributes never change once a row is emitted; mutable
/// attributes are estimates that refine across snapshots and carry
/// uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutability {
    Constant,
    Mutable,
}

impl Mutability {
    pub fn name(self) -> &'static str {
        match self {
            Mutability::Constant => "constant",
            Mutability::Mutable => "mutable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Mutability::Constant),
            "mutable" => Ok(Mutability::Mutable),
            other => Err(Error::Schema(format!("unknown mutability `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeDef {
    pub name: String,
    pub value_kind: ValueKind,
    pub mutability: Mutability,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, value_kind: ValueKind, mutability: Mutability) -> Self {
        AttributeDef { name: name.into(), value_kind, mutability }
    }

    pub fn constant(name: impl Into<String>, value_kind: ValueKind) -> Self {
        Self::new(name, value_kind, Mutability::Constant)
    }

    pub fn mutable(name: impl Into<String>, value_kind: ValueKind) -> Self {
        Self::new(name, value_kind, Mutability::Mutable)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdfSchema {
    pub attributes: Vec<AttributeDef>,
    pub primary_key: Vec<String>,
    /// Physical placement key: rows of one clustering-key value never span
    /// partitions, and partition key ranges are disjoint and ordered.
    pub clustering_key: Option<Vec<String>>,
}

impl EdfSchema {
    pub fn new(
        attributes: Vec<AttributeDef>,
        primary_key: Vec<String>,
        clustering_key: Option<Vec<String>>,
    ) -> Result<Self> {
        let schema = EdfSchema { attributes, primary_key, clustering_key };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", a.name)));
            }
        }
        // An empty primary key is the degenerate schema of a scalar
        // result: the whole dataset is one logical row.
        for name in &self.primary_key {
            let attr = self
                .attribute(name)
                .ok_or_else(|| Error::Schema(format!("primary key `{name}` not in schema")))?;
            if attr.mutability != Mutability::Constant {
                return Err(Error::Schema(format!(
                    "primary key `{name}` must be a constant attribute"
                )));
            }
        }
        if let Some(ck) = &self.clustering_key {
            for name in ck {
                if self.attribute(name).is_none() {
                    return Err(Error::Schema(format!("clustering key `{name}` not in schema")));
                }
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn mutable_attributes(&self) -> impl Iterator<Item = &AttributeDef> {
        self.attributes.iter().filter(|a| a.mutability == Mutability::Mutable)
    }

    pub fn is_clustered_on(&self, keys: &[String]) -> bool {
        match &self.clustering_key {
            Some(ck) => {
                !ck.is_empty()
                    && ck.len() == keys.len()
                    && keys.iter().all(|k| ck.contains(k))
            }
            None => false,
        }
    }
}
