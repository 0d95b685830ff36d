//! Wire data model, the boxed-scalar JSON codec, call envelopes and the
//! route grammar.
//!
//! Every scalar on the wire travels as a one-element JSON array
//! (`"error_code":[0]`), homogeneous scalar vectors travel as plain arrays
//! (`[1,2,3]`), matrices travel as arrays of row arrays, and maps travel as
//! JSON objects. Response documents are additionally wrapped in a
//! one-element top-level array; request documents are a single object.

use std::fmt;

use indexmap::IndexMap;
use serde_json::{Map, Number, Value};
use thiserror::Error;

/// Ordered string-keyed map of values. Keys such as
/// `global_parameters.age0` are opaque: dots do not imply nesting.
pub type ValueMap = IndexMap<String, ModelValue>;

pub const ERROR_CODE: &str = "error_code";
pub const ERROR_MESSAGE: &str = "error_message";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("non-canonical boxing in field `{field}`: {detail}")]
    NonCanonicalBoxing { field: String, detail: String },
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
}

/// A rectangular, row-major matrix of numbers with at least one row and one
/// column.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, WireError> {
        if rows == 0 || cols == 0 {
            return Err(WireError::InvalidMatrix(format!(
                "dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(WireError::InvalidMatrix(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, WireError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(WireError::InvalidMatrix("rows have unequal length".into()));
        }
        Self::new(n_rows, n_cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        (row < self.rows && col < self.cols).then(|| self.data[row * self.cols + col])
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The recursive, JSON-compatible value exchanged with models.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelValue {
    Null,
    Bool(bool),
    Number(f64),
    String(String),
    List(Vec<ModelValue>),
    Map(ValueMap),
    Matrix(Matrix),
}

impl ModelValue {
    pub fn is_scalar(&self) -> bool {
        matches!(
            self,
            ModelValue::Null | ModelValue::Bool(_) | ModelValue::Number(_) | ModelValue::String(_)
        )
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ModelValue::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ModelValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ModelValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&ValueMap> {
        match self {
            ModelValue::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_map(self) -> Option<ValueMap> {
        match self {
            ModelValue::Map(m) => Some(m),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ModelValue::Null => "null",
            ModelValue::Bool(_) => "boolean",
            ModelValue::Number(_) => "number",
            ModelValue::String(_) => "string",
            ModelValue::List(_) => "list",
            ModelValue::Map(_) => "map",
            ModelValue::Matrix(_) => "matrix",
        }
    }
}

impl From<f64> for ModelValue {
    fn from(x: f64) -> Self {
        ModelValue::Number(x)
    }
}

impl From<bool> for ModelValue {
    fn from(b: bool) -> Self {
        ModelValue::Bool(b)
    }
}

impl From<&str> for ModelValue {
    fn from(s: &str) -> Self {
        ModelValue::String(s.to_owned())
    }
}

impl From<String> for ModelValue {
    fn from(s: String) -> Self {
        ModelValue::String(s)
    }
}

impl From<ValueMap> for ModelValue {
    fn from(m: ValueMap) -> Self {
        ModelValue::Map(m)
    }
}

impl From<Matrix> for ModelValue {
    fn from(m: Matrix) -> Self {
        ModelValue::Matrix(m)
    }
}

macro_rules! map_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq)]
        pub struct $name(pub ValueMap);

        impl std::ops::Deref for $name {
            type Target = ValueMap;
            fn deref(&self) -> &ValueMap {
                &self.0
            }
        }

        impl std::ops::DerefMut for $name {
            fn deref_mut(&mut self) -> &mut ValueMap {
                &mut self.0
            }
        }

        impl From<ValueMap> for $name {
            fn from(m: ValueMap) -> Self {
                Self(m)
            }
        }

        impl $name {
            pub fn into_inner(self) -> ValueMap {
                self.0
            }
        }
    };
}

map_newtype!(
    /// Named model parameters, as sent to `prism_model_run`.
    ModelInput
);
map_newtype!(
    /// Named model results.
    ModelOutput
);

// ---------------------------------------------------------------------------
// Encoding

const MAX_EXACT_INT: f64 = 9_007_199_254_740_992.0; // 2^53

fn number_json(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < MAX_EXACT_INT {
        Value::Number(Number::from(x as i64))
    } else {
        Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
    }
}

fn scalar_json(v: &ModelValue) -> Value {
    match v {
        ModelValue::Null => Value::Null,
        ModelValue::Bool(b) => Value::Bool(*b),
        ModelValue::Number(x) => number_json(*x),
        ModelValue::String(s) => Value::String(s.clone()),
        _ => unreachable!("scalar_json called on {}", v.kind()),
    }
}

/// Boxed JSON tree for `v`, without the top-level response wrapper.
pub fn to_boxed_value(v: &ModelValue) -> Value {
    match v {
        s if s.is_scalar() => Value::Array(vec![scalar_json(s)]),
        ModelValue::List(items) => {
            if items.len() != 1 && items.iter().all(ModelValue::is_scalar) {
                Value::Array(items.iter().map(scalar_json).collect())
            } else {
                Value::Array(items.iter().map(to_boxed_value).collect())
            }
        }
        ModelValue::Map(m) => Value::Object(boxed_object(m)),
        ModelValue::Matrix(m) => Value::Array(
            (0..m.rows())
                .map(|r| Value::Array(m.row(r).iter().map(|x| number_json(*x)).collect()))
                .collect(),
        ),
        _ => unreachable!(),
    }
}

fn boxed_object(m: &ValueMap) -> Map<String, Value> {
    m.iter()
        .map(|(k, v)| (k.clone(), to_boxed_value(v)))
        .collect()
}

/// Encodes a response document. A top-level map is wrapped in a
/// one-element array, so an empty map encodes as `[{}]`.
pub fn encode_boxed(v: &ModelValue) -> String {
    let tree = match v {
        ModelValue::Map(m) => Value::Array(vec![Value::Object(boxed_object(m))]),
        other => to_boxed_value(other),
    };
    serde_json::to_string(&tree).expect("JSON trees always serialize")
}

/// Encodes a request document: a single object with boxed scalars.
pub fn encode_request(m: &ValueMap) -> String {
    serde_json::to_string(&Value::Object(boxed_object(m))).expect("JSON trees always serialize")
}

/// Natural (unboxed) JSON form: scalars bare, matrices as row arrays.
pub fn to_plain_json(v: &ModelValue) -> Value {
    match v {
        s if s.is_scalar() => scalar_json(s),
        ModelValue::List(items) => Value::Array(items.iter().map(to_plain_json).collect()),
        ModelValue::Map(m) => Value::Object(
            m.iter()
                .map(|(k, v)| (k.clone(), to_plain_json(v)))
                .collect(),
        ),
        ModelValue::Matrix(_) => to_boxed_value(v),
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Decoding

fn is_json_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn scalar_from_json(v: &Value) -> ModelValue {
    match v {
        Value::Null => ModelValue::Null,
        Value::Bool(b) => ModelValue::Bool(*b),
        Value::Number(n) => ModelValue::Number(n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => ModelValue::String(s.clone()),
        _ => unreachable!(),
    }
}

fn numeric_rows(items: &[Value]) -> Option<Matrix> {
    let first = items.first()?.as_array()?;
    let cols = first.len();
    if cols == 0 {
        return None;
    }
    let mut data = Vec::with_capacity(items.len() * cols);
    for row in items {
        let row = row.as_array()?;
        if row.len() != cols {
            return None;
        }
        for x in row {
            data.push(x.as_f64()?);
        }
    }
    Matrix::new(items.len(), cols, data).ok()
}

/// Decodes a boxed JSON tree. Bare scalars are accepted leniently.
pub fn from_boxed_value(v: &Value) -> ModelValue {
    match v {
        Value::Object(m) => ModelValue::Map(
            m.iter()
                .map(|(k, v)| (k.clone(), from_boxed_value(v)))
                .collect(),
        ),
        Value::Array(items) => {
            if items.len() == 1 && is_json_scalar(&items[0]) {
                scalar_from_json(&items[0])
            } else if items.iter().all(is_json_scalar) {
                ModelValue::List(items.iter().map(scalar_from_json).collect())
            } else if let Some(m) = numeric_rows(items) {
                ModelValue::Matrix(m)
            } else {
                ModelValue::List(items.iter().map(from_boxed_value).collect())
            }
        }
        scalar => scalar_from_json(scalar),
    }
}

fn parse_json(text: &str) -> Result<Value, WireError> {
    serde_json::from_str(text).map_err(|e| WireError::MalformedJson(e.to_string()))
}

/// Decodes a boxed document. A top-level one-element array holding an
/// object (the response wrapper) is unwrapped.
pub fn decode_boxed(text: &str) -> Result<ModelValue, WireError> {
    let root = parse_json(text)?;
    Ok(decode_root(&root))
}

pub(crate) fn decode_root(root: &Value) -> ModelValue {
    match root {
        Value::Array(items) if items.len() == 1 && items[0].is_object() => {
            from_boxed_value(&items[0])
        }
        other => from_boxed_value(other),
    }
}

/// Decodes a document that must be a map (after unwrapping).
pub fn decode_map(text: &str) -> Result<ValueMap, WireError> {
    match decode_boxed(text)? {
        ModelValue::Map(m) => Ok(m),
        other => Err(WireError::MalformedEnvelope(format!(
            "expected a JSON object, found {}",
            other.kind()
        ))),
    }
}

/// Whether `v` belongs to the set on which `decode_boxed(encode_boxed(v)) == v`
/// holds. Excluded shapes are those the encoding cannot tell apart: a list
/// holding a single number (reads back as a scalar or 1x1 matrix), a list
/// of equal-length numeric lists (reads back as a matrix), non-finite
/// numbers, empty map keys, and at the root a list holding a single map
/// (reads back as the response wrapper).
pub fn is_canonical(v: &ModelValue) -> bool {
    if let ModelValue::List(items) = v {
        if items.len() == 1 && matches!(items[0], ModelValue::Map(_)) {
            return false;
        }
    }
    is_canonical_inner(v)
}

fn numeric_list_len(v: &ModelValue) -> Option<usize> {
    match v {
        ModelValue::List(xs) if xs.iter().all(|x| matches!(x, ModelValue::Number(_))) => {
            Some(xs.len())
        }
        _ => None,
    }
}

fn is_canonical_inner(v: &ModelValue) -> bool {
    match v {
        ModelValue::Null | ModelValue::Bool(_) | ModelValue::String(_) => true,
        ModelValue::Number(x) => x.is_finite(),
        ModelValue::Matrix(m) => m.data().iter().all(|x| x.is_finite()),
        ModelValue::Map(m) => m
            .iter()
            .all(|(k, v)| !k.is_empty() && is_canonical_inner(v)),
        ModelValue::List(items) => {
            if items.len() == 1 && matches!(items[0], ModelValue::Number(_)) {
                return false;
            }
            if !items.is_empty() {
                let lens: Option<Vec<usize>> = items.iter().map(numeric_list_len).collect();
                if let Some(lens) = lens {
                    if lens[0] > 0 && lens.iter().all(|&l| l == lens[0]) {
                        return false;
                    }
                }
            }
            items.iter().all(is_canonical_inner)
        }
    }
}

// ---------------------------------------------------------------------------
// Envelopes

/// The three standardized call functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StandardFunc {
    GetDefaultInput,
    ModelRun,
    GetAsyncResults,
}

impl StandardFunc {
    pub const ALL: [StandardFunc; 3] = [
        StandardFunc::GetDefaultInput,
        StandardFunc::ModelRun,
        StandardFunc::GetAsyncResults,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StandardFunc::GetDefaultInput => "prism_get_default_input",
            StandardFunc::ModelRun => "prism_model_run",
            StandardFunc::GetAsyncResults => "prism_get_async_results",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for StandardFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Body of a `POST /route/...` call.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEnvelope {
    pub func: StandardFunc,
    /// `None` means "use the model's defaults".
    pub model_input: Option<ModelInput>,
    pub email_address: Option<String>,
    pub seed: Option<u64>,
    pub token: Option<String>,
}

impl RunEnvelope {
    pub fn new(func: StandardFunc) -> Self {
        Self {
            func,
            model_input: None,
            email_address: None,
            seed: None,
            token: None,
        }
    }

    pub fn parse(body: &str) -> Result<Self, WireError> {
        let root = parse_json(body)?;
        let obj = match &root {
            Value::Object(o) => o,
            Value::Array(items) if items.len() == 1 && items[0].is_object() => {
                items[0].as_object().unwrap()
            }
            _ => {
                return Err(WireError::MalformedEnvelope(
                    "request body must be a JSON object".into(),
                ))
            }
        };

        let func_name = boxed_string(obj, "func")?
            .ok_or_else(|| WireError::MalformedEnvelope("missing field `func`".into()))?;
        let func = StandardFunc::parse(&func_name).ok_or_else(|| {
            WireError::MalformedEnvelope(format!("unsupported func `{func_name}`"))
        })?;

        let model_input = match obj.get("model_input") {
            None | Some(Value::Null) => None,
            Some(v @ Value::Object(_)) => match from_boxed_value(v) {
                ModelValue::Map(m) => Some(ModelInput(m)),
                _ => unreachable!(),
            },
            Some(Value::Array(items)) if items.len() == 1 && items[0].is_object() => {
                from_boxed_value(&items[0]).into_map().map(ModelInput)
            }
            Some(_) => {
                return Err(WireError::MalformedEnvelope(
                    "`model_input` must be an object".into(),
                ))
            }
        };

        let email_address = boxed_string(obj, "email_address")?;
        let token = boxed_string(obj, "token")?;
        let seed = match boxed_scalar(obj, "seed")? {
            None | Some(ModelValue::Null) => None,
            Some(ModelValue::Number(x)) if x >= 0.0 && x.fract() == 0.0 && x < MAX_EXACT_INT => {
                Some(x as u64)
            }
            Some(other) => {
                return Err(WireError::MalformedEnvelope(format!(
                    "`seed` must be a non-negative integer, found {other:?}"
                )))
            }
        };

        match (func, &token) {
            (StandardFunc::GetAsyncResults, None) => {
                return Err(WireError::MalformedEnvelope(
                    "`prism_get_async_results` requires `token`".into(),
                ))
            }
            (StandardFunc::GetDefaultInput | StandardFunc::ModelRun, Some(_)) => {
                return Err(WireError::MalformedEnvelope(format!(
                    "`token` is only valid with `prism_get_async_results`, not `{func}`"
                )))
            }
            _ => {}
        }

        Ok(Self {
            func,
            model_input,
            email_address,
            seed,
            token,
        })
    }

    /// Request body with boxed scalars, as sent by clients.
    pub fn to_json(&self) -> String {
        let mut obj = Map::new();
        obj.insert("func".into(), Value::Array(vec![self.func.as_str().into()]));
        if let Some(input) = &self.model_input {
            obj.insert("model_input".into(), Value::Object(boxed_object(input)));
        }
        if let Some(email) = &self.email_address {
            obj.insert("email_address".into(), Value::Array(vec![email.as_str().into()]));
        }
        if let Some(seed) = self.seed {
            obj.insert("seed".into(), Value::Array(vec![seed.into()]));
        }
        if let Some(token) = &self.token {
            obj.insert("token".into(), Value::Array(vec![token.as_str().into()]));
        }
        serde_json::to_string(&Value::Object(obj)).expect("JSON trees always serialize")
    }
}

/// Reads a field that must hold a single scalar, boxed (`["x"]`) or bare.
fn boxed_scalar(obj: &Map<String, Value>, field: &str) -> Result<Option<ModelValue>, WireError> {
    let Some(v) = obj.get(field) else {
        return Ok(None);
    };
    match v {
        Value::Array(items) if items.len() == 1 && is_json_scalar(&items[0]) => {
            Ok(Some(scalar_from_json(&items[0])))
        }
        Value::Array(items) => Err(WireError::NonCanonicalBoxing {
            field: field.into(),
            detail: format!("expected a one-element array, found {} elements", items.len()),
        }),
        Value::Object(_) => Err(WireError::NonCanonicalBoxing {
            field: field.into(),
            detail: "expected a scalar, found an object".into(),
        }),
        bare => Ok(Some(scalar_from_json(bare))),
    }
}

fn boxed_string(obj: &Map<String, Value>, field: &str) -> Result<Option<String>, WireError> {
    match boxed_scalar(obj, field)? {
        None | Some(ModelValue::Null) => Ok(None),
        Some(ModelValue::String(s)) => Ok(Some(s)),
        Some(other) => Err(WireError::MalformedEnvelope(format!(
            "`{field}` must be a string, found {}",
            other.kind()
        ))),
    }
}

/// Successful response: `entries` followed by `error_code: 0`.
pub fn ok_response(mut entries: ValueMap) -> String {
    entries.shift_remove(ERROR_CODE);
    entries.insert(ERROR_CODE.into(), ModelValue::Number(0.0));
    encode_boxed(&ModelValue::Map(entries))
}

/// Error response: `[{"error_code":[N],"error_message":["..."]}]`.
pub fn error_response(code: u32, message: &str) -> String {
    let mut m = ValueMap::new();
    m.insert(ERROR_CODE.into(), ModelValue::Number(code as f64));
    m.insert(ERROR_MESSAGE.into(), ModelValue::String(message.into()));
    encode_boxed(&ModelValue::Map(m))
}

// ---------------------------------------------------------------------------
// Routes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteMode {
    Sync,
    AsyncSubmit,
    AsyncStatus,
}

impl RouteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteMode::Sync => "sync",
            RouteMode::AsyncSubmit => "async_submit",
            RouteMode::AsyncStatus => "async_status",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteTarget {
    pub model: String,
    pub mode: RouteMode,
}

impl RouteTarget {
    pub fn path(&self) -> String {
        match self.mode {
            RouteMode::Sync => format!("/route/{}/run", self.model),
            RouteMode::AsyncSubmit => format!("/route/{}/async/run", self.model),
            RouteMode::AsyncStatus => format!("/route/{}/async/status", self.model),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("unknown route `{0}`")]
    UnknownRoute(String),
    #[error("invalid model name `{0}`")]
    InvalidModelName(String),
}

/// `[a-z0-9_-]{1,64}`
pub fn is_valid_model_name(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub fn parse_route(path: &str) -> Result<RouteTarget, RouteError> {
    let rest = path
        .strip_prefix("/route/")
        .ok_or_else(|| RouteError::UnknownRoute(path.into()))?;
    let segments: Vec<&str> = rest.split('/').collect();
    let (model, mode) = match segments.as_slice() {
        [m, "run"] => (*m, RouteMode::Sync),
        [m, "async", "run"] => (*m, RouteMode::AsyncSubmit),
        [m, "async", "status"] => (*m, RouteMode::AsyncStatus),
        _ => return Err(RouteError::UnknownRoute(path.into())),
    };
    if !is_valid_model_name(model) {
        return Err(RouteError::InvalidModelName(model.into()));
    }
    Ok(RouteTarget {
        model: model.into(),
        mode,
    })
}
