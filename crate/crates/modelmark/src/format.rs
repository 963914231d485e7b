//! The `SDLM` on-disk model container.
//!
//! Little-endian throughout. A file is a 36-byte header followed by four
//! sections whose absolute offsets the header records:
//!
//! ```text
//! header:   magic "SDLM" · u32 version (=1) · u32 n_tensors · u32 n_operators
//!           · u32 n_buffers · u32 offsets to {tensor, operator, buffer, io} tables
//! tensor:   u32 name_len · name bytes (UTF-8) · u8 dtype · u8 rank
//!           · u32 × rank dims · u32 buffer index (0xFFFF_FFFF = none)
//! operator: u8 opcode · u8 n_in · u8 n_out · u32 × (n_in + n_out) tensor indices
//!           · u32 options_len · options bytes
//! buffer:   u64 length · raw bytes, zero-padded to a 4-byte boundary
//! io:       u32 n_inputs · u32 × n indices · u32 n_outputs · u32 × n indices
//! ```
//!
//! `CONV_2D` options are `u16 stride_h · u16 stride_w · u8 padding`
//! (0 = VALID, 1 = SAME); `MAX_POOL_2D` options are
//! `u16 pool_h · u16 pool_w · u16 stride_h · u16 stride_w`; every other opcode
//! carries zero option bytes.
//!
//! Parsing is total: any byte slice produces either a validated
//! [`SerializedModel`] or a typed [`FormatError`], never a panic. The writer
//! emits the one canonical layout (sections contiguous, in header order), so
//! parse → write is the identity on canonically produced files and a fixed
//! point after one step for anything else.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SDLM";
pub const VERSION: u32 = 1;
const NO_BUFFER: u32 = 0xFFFF_FFFF;
const HEADER_LEN: usize = 36;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"SDLM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("truncated {section} section at byte {offset}")]
    TruncatedSection { section: &'static str, offset: usize },
    #[error("unknown {what} code {code}")]
    UnknownCode { what: &'static str, code: u32 },
    #[error("tensor {tensor} has a non-UTF-8 name")]
    BadName { tensor: usize },
    #[error("tensor {tensor} has a zero-sized dimension")]
    EmptyShape { tensor: usize },
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange { what: &'static str, index: usize, limit: usize },
    #[error("operator {op} ({opcode:?}) expects {expected_in} inputs and 1 output, has {found_in} and {found_out}")]
    ArityMismatch { op: usize, opcode: OpCode, expected_in: usize, found_in: usize, found_out: usize },
    #[error("operator {op} ({opcode:?}) options malformed: {detail}")]
    OptionsMismatch { op: usize, opcode: OpCode, detail: String },
    #[error("tensor {tensor} needs {expected} buffer bytes, buffer {buffer} holds {actual}")]
    BufferSizeMismatch { tensor: usize, buffer: usize, expected: u128, actual: usize },
    #[error("operator {op} reads tensor {tensor}, which is neither a graph input, a parameter, nor an earlier operator's output")]
    DanglingInput { op: usize, tensor: usize },
    #[error("operator {op} writes tensor {tensor}, which is already defined")]
    RedefinedTensor { op: usize, tensor: usize },
    #[error("graph declares {count} inputs, exactly one expected")]
    MultipleInputs { count: usize },
    #[error("graph declares {count} outputs, exactly one expected")]
    MultipleOutputs { count: usize },
}

// ─── graph description ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
    U8,
}

impl DType {
    pub fn byte_size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }

    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, FormatError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            2 => Ok(DType::U8),
            c => Err(FormatError::UnknownCode { what: "dtype", code: c as u32 }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCode {
    FullyConnected,
    Conv2d,
    MaxPool2d,
    Relu,
    Softmax,
    Flatten,
}

impl OpCode {
    /// Required input arity; every opcode produces exactly one output.
    pub fn input_arity(self) -> usize {
        match self {
            OpCode::FullyConnected | OpCode::Conv2d => 3,
            _ => 1,
        }
    }

    fn code(self) -> u8 {
        match self {
            OpCode::FullyConnected => 0,
            OpCode::Conv2d => 1,
            OpCode::MaxPool2d => 2,
            OpCode::Relu => 3,
            OpCode::Softmax => 4,
            OpCode::Flatten => 5,
        }
    }

    fn from_code(code: u8) -> Result<Self, FormatError> {
        Ok(match code {
            0 => OpCode::FullyConnected,
            1 => OpCode::Conv2d,
            2 => OpCode::MaxPool2d,
            3 => OpCode::Relu,
            4 => OpCode::Softmax,
            5 => OpCode::Flatten,
            c => return Err(FormatError::UnknownCode { what: "opcode", code: c as u32 }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpOptions {
    None,
    Conv2d { stride_h: u16, stride_w: u16, padding: Padding },
    MaxPool2d { pool_h: u16, pool_w: u16, stride_h: u16, stride_w: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDesc {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    /// Index into the buffer table; `None` for activation tensors.
    pub buffer: Option<usize>,
}

impl TensorDesc {
    pub fn element_count(&self) -> u128 {
        self.dims.iter().map(|&d| d as u128).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorDesc {
    pub opcode: OpCode,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub options: OpOptions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphDesc {
    pub tensors: Vec<TensorDesc>,
    /// Topologically ordered: an operator may only read graph inputs,
    /// buffer-backed parameters, or outputs of earlier operators.
    pub operators: Vec<OperatorDesc>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub n_tensors: u32,
    pub n_operators: u32,
    pub n_buffers: u32,
    pub tensor_table: u32,
    pub operator_table: u32,
    pub buffer_table: u32,
    pub io_table: u32,
}

/// A parsed, validated, read-only model file.
#[derive(Debug, Clone)]
pub struct SerializedModel {
    bytes: Vec<u8>,
    header: Header,
    graph: GraphDesc,
    /// (offset, length) of each buffer's payload inside `bytes`.
    buffer_spans: Vec<(usize, usize)>,
}

impl SerializedModel {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn graph(&self) -> &GraphDesc {
        &self.graph
    }

    pub fn buffer(&self, index: usize) -> &[u8] {
        let (off, len) = self.buffer_spans[index];
        &self.bytes[off..off + len]
    }

    pub fn n_buffers(&self) -> usize {
        self.buffer_spans.len()
    }
}

/// Uniform read access to a model graph plus its parameter buffers; lets the
/// inference engine run both parsed and rooted models.
pub trait ModelView {
    fn graph(&self) -> &GraphDesc;
    fn buffer_bytes(&self, index: usize) -> &[u8];
}

impl ModelView for SerializedModel {
    fn graph(&self) -> &GraphDesc {
        &self.graph
    }

    fn buffer_bytes(&self, index: usize) -> &[u8] {
        self.buffer(index)
    }
}

/// `(input_shape, num_labels)` of a single-input single-output classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSignature {
    pub input_shape: Vec<u32>,
    pub num_labels: u32,
}

// ─── parsing ────────────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], pos: usize, section: &'static str) -> Self {
        Cursor { bytes, pos, section }
    }

    fn truncated(&self) -> FormatError {
        FormatError::TruncatedSection { section: self.section, offset: self.pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos.min(self.bytes.len()) < n {
            return Err(self.truncated());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse and validate a model file. Pure: the input is only read.
pub fn parse_model(bytes: &[u8]) -> Result<SerializedModel, FormatError> {
    let mut found = [0u8; 4];
    let head = bytes.get(..4).unwrap_or(&[]);
    found[..head.len()].copy_from_slice(head);
    if found != MAGIC {
        return Err(FormatError::BadMagic { found });
    }

    let mut cur = Cursor::new(bytes, 4, "header");
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let header = Header {
        version,
        n_tensors: cur.u32()?,
        n_operators: cur.u32()?,
        n_buffers: cur.u32()?,
        tensor_table: cur.u32()?,
        operator_table: cur.u32()?,
        buffer_table: cur.u32()?,
        io_table: cur.u32()?,
    };

    // Tensor table.
    let mut cur = Cursor::new(bytes, header.tensor_table as usize, "tensor table");
    let mut tensors = Vec::new();
    for t in 0..header.n_tensors as usize {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| FormatError::BadName { tensor: t })?
            .to_string();
        let dtype = DType::from_code(cur.u8()?)?;
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            dims.push(cur.u32()?);
        }
        let buffer = match cur.u32()? {
            NO_BUFFER => None,
            idx => Some(idx as usize),
        };
        tensors.push(TensorDesc { name, dtype, dims, buffer });
    }

    // Operator table.
    let mut cur = Cursor::new(bytes, header.operator_table as usize, "operator table");
    let mut operators = Vec::new();
    for op in 0..header.n_operators as usize {
        let opcode = OpCode::from_code(cur.u8()?)?;
        let n_in = cur.u8()? as usize;
        let n_out = cur.u8()? as usize;
        let mut inputs = Vec::with_capacity(n_in);
        for _ in 0..n_in {
            inputs.push(cur.u32()? as usize);
        }
        let mut outputs = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            outputs.push(cur.u32()? as usize);
        }
        let options_len = cur.u32()? as usize;
        let raw = cur.take(options_len)?;
        let options = decode_options(op, opcode, raw)?;
        operators.push(OperatorDesc { opcode, inputs, outputs, options });
    }

    // Buffer table.
    let mut cur = Cursor::new(bytes, header.buffer_table as usize, "buffer table");
    let mut buffer_spans = Vec::new();
    for _ in 0..header.n_buffers as usize {
        let len = cur.u64()? as usize;
        let start = cur.pos;
        cur.take(len)?;
        cur.take(pad4(len))?;
        buffer_spans.push((start, len));
    }

    // IO table.
    let mut cur = Cursor::new(bytes, header.io_table as usize, "io table");
    let mut inputs = Vec::new();
    for _ in 0..cur.u32()? as usize {
        inputs.push(cur.u32()? as usize);
    }
    let mut outputs = Vec::new();
    for _ in 0..cur.u32()? as usize {
        outputs.push(cur.u32()? as usize);
    }

    let graph = GraphDesc { tensors, operators, inputs, outputs };
    let buffer_lens: Vec<usize> = buffer_spans.iter().map(|&(_, len)| len).collect();
    validate_graph(&graph, &buffer_lens)?;

    Ok(SerializedModel { bytes: bytes.to_vec(), header, graph, buffer_spans })
}

fn decode_options(op: usize, opcode: OpCode, raw: &[u8]) -> Result<OpOptions, FormatError> {
    let expected = match opcode {
        OpCode::Conv2d => 5,
        OpCode::MaxPool2d => 8,
        _ => 0,
    };
    if raw.len() != expected {
        return Err(FormatError::OptionsMismatch {
            op,
            opcode,
            detail: format!("expected {expected} option bytes, found {}", raw.len()),
        });
    }
    let mut cur = Cursor::new(raw, 0, "operator options");
    Ok(match opcode {
        OpCode::Conv2d => {
            let stride_h = cur.u16()?;
            let stride_w = cur.u16()?;
            let padding = match cur.u8()? {
                0 => Padding::Valid,
                1 => Padding::Same,
                c => return Err(FormatError::UnknownCode { what: "padding", code: c as u32 }),
            };
            OpOptions::Conv2d { stride_h, stride_w, padding }
        }
        OpCode::MaxPool2d => OpOptions::MaxPool2d {
            pool_h: cur.u16()?,
            pool_w: cur.u16()?,
            stride_h: cur.u16()?,
            stride_w: cur.u16()?,
        },
        _ => OpOptions::None,
    })
}

fn pad4(len: usize) -> usize {
    (4 - (len & 3)) & 3
}

// ─── validation ─────────────────────────────────────────────────────────────

/// Structural invariants shared by the parser and the writer.
pub(crate) fn validate_graph(graph: &GraphDesc, buffer_lens: &[usize]) -> Result<(), FormatError> {
    let n_tensors = graph.tensors.len();

    for (t, tensor) in graph.tensors.iter().enumerate() {
        if tensor.dims.iter().any(|&d| d == 0) {
            return Err(FormatError::EmptyShape { tensor: t });
        }
        if let Some(b) = tensor.buffer {
            let actual = *buffer_lens.get(b).ok_or(FormatError::IndexOutOfRange {
                what: "buffer",
                index: b,
                limit: buffer_lens.len(),
            })?;
            let expected = tensor.element_count() * tensor.dtype.byte_size() as u128;
            if expected != actual as u128 {
                return Err(FormatError::BufferSizeMismatch { tensor: t, buffer: b, expected, actual });
            }
        }
    }

    let check_index = |what: &'static str, index: usize| -> Result<(), FormatError> {
        if index >= n_tensors {
            return Err(FormatError::IndexOutOfRange { what, index, limit: n_tensors });
        }
        Ok(())
    };

    for &i in &graph.inputs {
        check_index("graph input tensor", i)?;
    }
    for &i in &graph.outputs {
        check_index("graph output tensor", i)?;
    }

    // Defined set: graph inputs and parameters up front, operator outputs as
    // the topological walk reaches them.
    let mut defined = vec![false; n_tensors];
    for &i in &graph.inputs {
        defined[i] = true;
    }
    for (t, tensor) in graph.tensors.iter().enumerate() {
        if tensor.buffer.is_some() {
            defined[t] = true;
        }
    }

    for (op, operator) in graph.operators.iter().enumerate() {
        let expected_in = operator.opcode.input_arity();
        if operator.inputs.len() != expected_in || operator.outputs.len() != 1 {
            return Err(FormatError::ArityMismatch {
                op,
                opcode: operator.opcode,
                expected_in,
                found_in: operator.inputs.len(),
                found_out: operator.outputs.len(),
            });
        }
        let options_ok = matches!(
            (operator.opcode, &operator.options),
            (OpCode::Conv2d, OpOptions::Conv2d { .. })
                | (OpCode::MaxPool2d, OpOptions::MaxPool2d { .. })
                | (
                    OpCode::FullyConnected | OpCode::Relu | OpCode::Softmax | OpCode::Flatten,
                    OpOptions::None
                )
        );
        if !options_ok {
            return Err(FormatError::OptionsMismatch {
                op,
                opcode: operator.opcode,
                detail: "options variant does not match opcode".into(),
            });
        }
        for &i in &operator.inputs {
            check_index("operator input tensor", i)?;
            if !defined[i] {
                return Err(FormatError::DanglingInput { op, tensor: i });
            }
        }
        for &o in &operator.outputs {
            check_index("operator output tensor", o)?;
            if defined[o] {
                return Err(FormatError::RedefinedTensor { op, tensor: o });
            }
            defined[o] = true;
        }
    }

    Ok(())
}

// ─── writing ────────────────────────────────────────────────────────────────

/// Serialize a graph and its buffers into the canonical byte layout.
pub(crate) fn write_model(graph: &GraphDesc, buffers: &[Vec<u8>]) -> Result<Vec<u8>, FormatError> {
    let buffer_lens: Vec<usize> = buffers.iter().map(Vec::len).collect();
    validate_graph(graph, &buffer_lens)?;

    let mut tensor_table = Vec::new();
    for tensor in &graph.tensors {
        push_u32(&mut tensor_table, tensor.name.len() as u32);
        tensor_table.extend_from_slice(tensor.name.as_bytes());
        tensor_table.push(tensor.dtype.code());
        debug_assert!(tensor.dims.len() <= u8::MAX as usize);
        tensor_table.push(tensor.dims.len() as u8);
        for &d in &tensor.dims {
            push_u32(&mut tensor_table, d);
        }
        push_u32(&mut tensor_table, tensor.buffer.map_or(NO_BUFFER, |b| b as u32));
    }

    let mut operator_table = Vec::new();
    for operator in &graph.operators {
        operator_table.push(operator.opcode.code());
        operator_table.push(operator.inputs.len() as u8);
        operator_table.push(operator.outputs.len() as u8);
        for &i in operator.inputs.iter().chain(&operator.outputs) {
            push_u32(&mut operator_table, i as u32);
        }
        let opts = encode_options(&operator.options);
        push_u32(&mut operator_table, opts.len() as u32);
        operator_table.extend_from_slice(&opts);
    }

    let mut buffer_table = Vec::new();
    for buf in buffers {
        buffer_table.extend_from_slice(&(buf.len() as u64).to_le_bytes());
        buffer_table.extend_from_slice(buf);
        buffer_table.extend(std::iter::repeat(0u8).take(pad4(buf.len())));
    }

    let mut io_table = Vec::new();
    push_u32(&mut io_table, graph.inputs.len() as u32);
    for &i in &graph.inputs {
        push_u32(&mut io_table, i as u32);
    }
    push_u32(&mut io_table, graph.outputs.len() as u32);
    for &o in &graph.outputs {
        push_u32(&mut io_table, o as u32);
    }

    let tensor_off = HEADER_LEN;
    let operator_off = tensor_off + tensor_table.len();
    let buffer_off = operator_off + operator_table.len();
    let io_off = buffer_off + buffer_table.len();

    let mut out = Vec::with_capacity(io_off + io_table.len());
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, graph.tensors.len() as u32);
    push_u32(&mut out, graph.operators.len() as u32);
    push_u32(&mut out, buffers.len() as u32);
    push_u32(&mut out, tensor_off as u32);
    push_u32(&mut out, operator_off as u32);
    push_u32(&mut out, buffer_off as u32);
    push_u32(&mut out, io_off as u32);
    out.extend_from_slice(&tensor_table);
    out.extend_from_slice(&operator_table);
    out.extend_from_slice(&buffer_table);
    out.extend_from_slice(&io_table);
    Ok(out)
}

fn encode_options(options: &OpOptions) -> Vec<u8> {
    match options {
        OpOptions::None => Vec::new(),
        OpOptions::Conv2d { stride_h, stride_w, padding } => {
            let mut v = Vec::with_capacity(5);
            v.extend_from_slice(&stride_h.to_le_bytes());
            v.extend_from_slice(&stride_w.to_le_bytes());
            v.push(match padding {
                Padding::Valid => 0,
                Padding::Same => 1,
            });
            v
        }
        OpOptions::MaxPool2d { pool_h, pool_w, stride_h, stride_w } => {
            let mut v = Vec::with_capacity(8);
            for x in [pool_h, pool_w, stride_h, stride_w] {
                v.extend_from_slice(&x.to_le_bytes());
            }
            v
        }
    }
}

fn push_u32(out: &mut Vec<u8>, value: u32) {
    out.extend_from_slice(&value.to_le_bytes());
}

// ─── signature ──────────────────────────────────────────────────────────────

/// Input shape and label count of a single-input single-output classifier.
pub fn model_signature(model: &SerializedModel) -> Result<ModelSignature, FormatError> {
    graph_signature(model.graph())
}

pub fn graph_signature(graph: &GraphDesc) -> Result<ModelSignature, FormatError> {
    if graph.inputs.len() != 1 {
        return Err(FormatError::MultipleInputs { count: graph.inputs.len() });
    }
    if graph.outputs.len() != 1 {
        return Err(FormatError::MultipleOutputs { count: graph.outputs.len() });
    }
    let input = &graph.tensors[graph.inputs[0]];
    let output = &graph.tensors[graph.outputs[0]];
    Ok(ModelSignature {
        input_shape: input.dims.clone(),
        num_labels: output.dims.last().copied().unwrap_or(1),
    })
}

// ─── tests ──────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Byte-for-byte assembly of a minimal one-FC model, independent of the
    /// writer. Freezes the layout: header 36 bytes, then tensor table at 36,
    /// operator table at 103, buffer table at 126, io table at 154, 170 total.
    fn hand_assembled() -> Vec<u8> {
        let mut b = Vec::new();
        let u32le = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());

        b.extend_from_slice(b"SDLM");
        u32le(&mut b, 1); // version
        u32le(&mut b, 4); // tensors
        u32le(&mut b, 1); // operators
        u32le(&mut b, 2); // buffers
        u32le(&mut b, 36); // tensor table
        u32le(&mut b, 103); // operator table
        u32le(&mut b, 126); // buffer table
        u32le(&mut b, 154); // io table
        assert_eq!(b.len(), 36);

        // t0 "in": F32 [2], no buffer
        u32le(&mut b, 2);
        b.extend_from_slice(b"in");
        b.push(0); // F32
        b.push(1); // rank
        u32le(&mut b, 2);
        u32le(&mut b, 0xFFFF_FFFF);
        // t1 "w": F32 [1,2], buffer 0
        u32le(&mut b, 1);
        b.extend_from_slice(b"w");
        b.push(0);
        b.push(2);
        u32le(&mut b, 1);
        u32le(&mut b, 2);
        u32le(&mut b, 0);
        // t2 "b": F32 [1], buffer 1
        u32le(&mut b, 1);
        b.extend_from_slice(b"b");
        b.push(0);
        b.push(1);
        u32le(&mut b, 1);
        u32le(&mut b, 1);
        // t3 "out": F32 [1], no buffer
        u32le(&mut b, 3);
        b.extend_from_slice(b"out");
        b.push(0);
        b.push(1);
        u32le(&mut b, 1);
        u32le(&mut b, 0xFFFF_FFFF);
        assert_eq!(b.len(), 103);

        // op 0: FULLY_CONNECTED(in, w, b) -> out
        b.push(0); // opcode
        b.push(3); // n_in
        b.push(1); // n_out
        u32le(&mut b, 0);
        u32le(&mut b, 1);
        u32le(&mut b, 2);
        u32le(&mut b, 3);
        u32le(&mut b, 0); // options_len
        assert_eq!(b.len(), 126);

        // buffer 0: w = [[2.0, -1.0]]
        b.extend_from_slice(&8u64.to_le_bytes());
        b.extend_from_slice(&2.0f32.to_le_bytes());
        b.extend_from_slice(&(-1.0f32).to_le_bytes());
        // buffer 1: b = [0.5]
        b.extend_from_slice(&4u64.to_le_bytes());
        b.extend_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(b.len(), 154);

        // io: inputs [0], outputs [3]
        u32le(&mut b, 1);
        u32le(&mut b, 0);
        u32le(&mut b, 1);
        u32le(&mut b, 3);
        assert_eq!(b.len(), 170);
        b
    }

    #[test]
    fn hand_assembled_model_parses() {
        let bytes = hand_assembled();
        let model = parse_model(&bytes).unwrap();
        assert_eq!(model.header().n_tensors, 4);
        assert_eq!(model.header().n_operators, 1);
        assert_eq!(model.header().n_buffers, 2);
        let g = model.graph();
        assert_eq!(g.tensors.len(), 4);
        assert_eq!(g.tensors[0].name, "in");
        assert_eq!(g.tensors[1].dims, vec![1, 2]);
        assert_eq!(g.tensors[1].buffer, Some(0));
        assert_eq!(g.operators.len(), 1);
        assert_eq!(g.operators[0].opcode, OpCode::FullyConnected);
        assert_eq!(g.operators[0].inputs, vec![0, 1, 2]);
        assert_eq!(g.operators[0].outputs, vec![3]);
        assert_eq!(g.inputs, vec![0]);
        assert_eq!(g.outputs, vec![3]);
        assert_eq!(model.buffer(1), 0.5f32.to_le_bytes());
    }

    #[test]
    fn writer_reproduces_hand_assembled_bytes() {
        let bytes = hand_assembled();
        let model = parse_model(&bytes).unwrap();
        let buffers: Vec<Vec<u8>> = (0..model.n_buffers()).map(|i| model.buffer(i).to_vec()).collect();
        let rewritten = write_model(model.graph(), &buffers).unwrap();
        assert_eq!(rewritten, bytes);
    }

    #[test]
    fn parse_does_not_mutate_input() {
        let bytes = hand_assembled();
        let before = bytes.clone();
        let _ = parse_model(&bytes).unwrap();
        assert_eq!(bytes, before);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = hand_assembled();
        bytes[..4].copy_from_slice(b"XXXX");
        match parse_model(&bytes) {
            Err(FormatError::BadMagic { found }) => assert_eq!(&found, b"XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
        assert!(matches!(parse_model(b"SD"), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = hand_assembled();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(parse_model(&bytes), Err(FormatError::UnsupportedVersion(7))));
    }

    #[test]
    fn truncation_is_reported_per_section() {
        let bytes = hand_assembled();
        assert!(matches!(
            parse_model(&bytes[..30]),
            Err(FormatError::TruncatedSection { section: "header", .. })
        ));
        assert!(matches!(
            parse_model(&bytes[..60]),
            Err(FormatError::TruncatedSection { section: "tensor table", .. })
        ));
        assert!(matches!(
            parse_model(&bytes[..110]),
            Err(FormatError::TruncatedSection { section: "operator table", .. })
        ));
        assert!(matches!(
            parse_model(&bytes[..130]),
            Err(FormatError::TruncatedSection { section: "buffer table", .. })
        ));
        assert!(matches!(
            parse_model(&bytes[..160]),
            Err(FormatError::TruncatedSection { section: "io table", .. })
        ));
    }

    #[test]
    fn out_of_range_operator_input_is_rejected() {
        let mut bytes = hand_assembled();
        // First operator input index lives at 106 (op record starts at 103).
        bytes[106..110].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            parse_model(&bytes),
            Err(FormatError::IndexOutOfRange { what: "operator input tensor", index: 99, .. })
        ));
    }

    #[test]
    fn buffer_size_mismatch_is_rejected() {
        let mut bytes = hand_assembled();
        // Shrink the weight tensor's second dim (at 63) from 2 to 1: the
        // 8-byte buffer no longer matches 1×1×4 bytes.
        bytes[63..67].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            parse_model(&bytes),
            Err(FormatError::BufferSizeMismatch { tensor: 1, buffer: 0, expected: 4, actual: 8 })
        ));
    }

    #[test]
    fn nonzero_options_on_fc_are_rejected() {
        let mut bytes = hand_assembled();
        // options_len is the last u32 of the operator record (bytes 122..126);
        // point it at 2 stray bytes (the parse then reads into the buffer
        // table, which decode_options rejects for FULLY_CONNECTED).
        bytes[122..126].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            parse_model(&bytes),
            Err(FormatError::OptionsMismatch { op: 0, opcode: OpCode::FullyConnected, .. })
        ));
    }

    fn minimal_graph() -> (GraphDesc, Vec<Vec<u8>>) {
        let model = parse_model(&hand_assembled()).unwrap();
        let buffers = (0..model.n_buffers()).map(|i| model.buffer(i).to_vec()).collect();
        (model.graph().clone(), buffers)
    }

    #[test]
    fn writer_rejects_bad_arity() {
        let (mut graph, buffers) = minimal_graph();
        graph.operators[0].inputs.pop();
        assert!(matches!(
            write_model(&graph, &buffers),
            Err(FormatError::ArityMismatch { op: 0, expected_in: 3, found_in: 2, .. })
        ));
    }

    #[test]
    fn writer_rejects_dangling_input() {
        let (mut graph, buffers) = minimal_graph();
        // Read the op's own output as an input: defined only later.
        graph.operators[0].inputs[0] = 3;
        graph.inputs = vec![];
        assert!(matches!(
            write_model(&graph, &buffers),
            Err(FormatError::DanglingInput { op: 0, tensor: 3 })
        ));
    }

    #[test]
    fn writer_rejects_wrong_buffer_size() {
        let (graph, mut buffers) = minimal_graph();
        buffers[0].truncate(6);
        assert!(matches!(
            write_model(&graph, &buffers),
            Err(FormatError::BufferSizeMismatch { tensor: 1, .. })
        ));
    }

    #[test]
    fn writer_rejects_zero_dimension() {
        let (mut graph, buffers) = minimal_graph();
        graph.tensors[0].dims = vec![0];
        assert!(matches!(
            write_model(&graph, &buffers),
            Err(FormatError::EmptyShape { tensor: 0 })
        ));
    }

    #[test]
    fn graph_survives_write_parse_cycle() {
        let (graph, buffers) = minimal_graph();
        let bytes = write_model(&graph, &buffers).unwrap();
        let reparsed = parse_model(&bytes).unwrap();
        assert_eq!(reparsed.graph(), &graph);
        assert_eq!(reparsed.buffer(0), &buffers[0][..]);
        assert_eq!(reparsed.buffer(1), &buffers[1][..]);
    }

    #[test]
    fn signature_of_minimal_model() {
        let model = parse_model(&hand_assembled()).unwrap();
        let sig = model_signature(&model).unwrap();
        assert_eq!(sig, ModelSignature { input_shape: vec![2], num_labels: 1 });
    }

    #[test]
    fn signature_of_image_classifier_shape() {
        // A 96×96×3 input with 10 output labels, as a resized mobile
        // classifier would declare.
        let graph = GraphDesc {
            tensors: vec![
                TensorDesc { name: "images".into(), dtype: DType::F32, dims: vec![96, 96, 3], buffer: None },
                TensorDesc { name: "flat".into(), dtype: DType::F32, dims: vec![27648], buffer: None },
                TensorDesc { name: "w".into(), dtype: DType::F32, dims: vec![10, 27648], buffer: Some(0) },
                TensorDesc { name: "bias".into(), dtype: DType::F32, dims: vec![10], buffer: Some(1) },
                TensorDesc { name: "logits".into(), dtype: DType::F32, dims: vec![10], buffer: None },
            ],
            operators: vec![
                OperatorDesc { opcode: OpCode::Flatten, inputs: vec![0], outputs: vec![1], options: OpOptions::None },
                OperatorDesc { opcode: OpCode::FullyConnected, inputs: vec![1, 2, 3], outputs: vec![4], options: OpOptions::None },
            ],
            inputs: vec![0],
            outputs: vec![4],
        };
        let buffers = vec![vec![0u8; 10 * 27648 * 4], vec![0u8; 40]];
        let bytes = write_model(&graph, &buffers).unwrap();
        let sig = model_signature(&parse_model(&bytes).unwrap()).unwrap();
        assert_eq!(sig.input_shape, vec![96, 96, 3]);
        assert_eq!(sig.num_labels, 10);
    }

    #[test]
    fn signature_rejects_multiple_outputs() {
        let (mut graph, _) = minimal_graph();
        graph.outputs = vec![3, 0];
        assert!(matches!(
            graph_signature(&graph),
            Err(FormatError::MultipleOutputs { count: 2 })
        ));
    }

    #[test]
    fn parser_is_total_on_fuzzed_bytes() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let valid = hand_assembled();
        for round in 0..400 {
            let bytes = if round % 2 == 0 {
                let mut b = vec![0u8; rng.gen_range(0..300)];
                rng.fill_bytes(&mut b);
                b
            } else {
                let mut b = valid.clone();
                for _ in 0..rng.gen_range(1..8) {
                    let i = rng.gen_range(0..b.len());
                    b[i] = rng.gen();
                }
                b
            };
            let _ = parse_model(&bytes); // must not panic
        }
    }
}
