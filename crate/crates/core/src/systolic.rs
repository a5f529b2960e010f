//! Cycle-stepped functional model of an output-stationary systolic array.
//!
//! Every processing element (PE) owns one scratchpad accumulator. B
//! operands enter at the top of each column and move down one PE per cycle;
//! A operands enter at the right of each row and move left. Both streams
//! are skewed so that `A[i][k]` and `B[k][j]` meet in PE `(i, j)`. A drain
//! token follows the last B operand of a column; when it reaches the bottom
//! row the column shifts its accumulators down, one per cycle, and the
//! bottom PE renders each one to the output format (the only rounding) into
//! a per-column FIFO.
//!
//! The whole array advances under a single clock enable: a cycle fires only
//! when every input beat is valid and every FIFO has room for one more
//! word. Outputs leave the FIFOs on cycles where they are valid and the
//! consumer is ready.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::accumulator::AccumulatorState;
use crate::fdp::DotProductConfig;
use crate::formats::decode;
use crate::gemm::{GemmError, MatrixBuffer};

/// Geometry of the simulated array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub dot_cfg: DotProductConfig,
    pub fifo_depth: usize,
}

/// Contents of an operand register or input lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Lane {
    #[default]
    Empty,
    Word(u128),
    /// End of a column's operand stream: start shifting results out.
    Drain,
}

/// One side of a valid/ready handshake. A payload transfers on exactly the
/// cycles where `valid && ready`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamBeat {
    pub payload: Lane,
    pub valid: bool,
    pub ready: bool,
}

impl StreamBeat {
    pub fn offer(payload: Lane) -> Self {
        StreamBeat {
            payload,
            valid: true,
            ready: false,
        }
    }

    pub fn idle() -> Self {
        StreamBeat::default()
    }
}

/// What left the array in one cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    /// Head of each column FIFO as presented this cycle; `ready` echoes the
    /// consumer, so the word was taken iff `valid && ready`.
    pub bottom: Vec<StreamBeat>,
    /// Whether the FIFOs had room, i.e. the array would accept a complete
    /// set of valid input beats this cycle.
    pub upstream_ready: bool,
    /// Whether the array advanced. Input beats are taken exactly on fired
    /// cycles, so this is the `ready` seen by every input lane.
    pub fired: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Pe {
    acc: AccumulatorState,
    a: Lane,
    b: Lane,
}

/// One traced handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub interface: String,
    pub valid: bool,
    pub ready: bool,
    pub payload: Lane,
}

#[derive(Debug, Clone)]
pub struct ArraySim {
    cfg: ArrayConfig,
    pes: Vec<Pe>,
    /// Remaining shift cycles of each column's drain.
    draining: Vec<usize>,
    fifos: Vec<VecDeque<u128>>,
    cycle: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl ArraySim {
    /// Fresh array: accumulators zero, registers empty, FIFOs empty.
    pub fn build(cfg: ArrayConfig) -> Self {
        assert!(cfg.rows >= 1 && cfg.cols >= 1, "array needs at least one PE");
        assert!(cfg.fifo_depth >= 1, "FIFO depth must be at least one");
        let pe = Pe {
            acc: AccumulatorState::new(cfg.dot_cfg.accumulator),
            a: Lane::Empty,
            b: Lane::Empty,
        };
        ArraySim {
            cfg,
            pes: vec![pe; cfg.rows * cfg.cols],
            draining: vec![0; cfg.cols],
            fifos: vec![VecDeque::with_capacity(cfg.fifo_depth); cfg.cols],
            cycle: 0,
            trace: None,
        }
    }

    pub fn config(&self) -> &ArrayConfig {
        &self.cfg
    }

    pub fn pe_count(&self) -> usize {
        self.pes.len()
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn accumulator(&self, row: usize, col: usize) -> &AccumulatorState {
        &self.pes[row * self.cfg.cols + col].acc
    }

    pub fn fifo_len(&self, col: usize) -> usize {
        self.fifos[col].len()
    }

    /// True while any column is shifting results out.
    pub fn is_draining(&self) -> bool {
        self.draining.iter().any(|&d| d > 0)
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Trace as CSV: `cycle,interface,valid,ready,payload`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("cycle,interface,valid,ready,payload\n");
        for r in self.trace() {
            let payload = match r.payload {
                Lane::Empty => String::new(),
                Lane::Word(w) => format!("{w:#x}"),
                Lane::Drain => "drain".to_string(),
            };
            let _ = writeln!(s, "{},{},{},{},{}", r.cycle, r.interface, r.valid as u8, r.ready as u8, payload);
        }
        s
    }

    fn record(&mut self, interface: String, beat: &StreamBeat) {
        let cycle = self.cycle;
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord {
                cycle,
                interface,
                valid: beat.valid,
                ready: beat.ready,
                payload: beat.payload,
            });
        }
    }

    /// Advances one clock cycle.
    ///
    /// `top` has one beat per column, `right` one per row. Input payloads
    /// are consumed only if the returned `fired` is true.
    pub fn step(&mut self, top: &[StreamBeat], right: &[StreamBeat], downstream_ready: bool) -> StepOutput {
        let (rows, cols) = (self.cfg.rows, self.cfg.cols);
        assert_eq!(top.len(), cols, "one top beat per column");
        assert_eq!(right.len(), rows, "one right beat per row");

        // Registered outputs: FIFO heads, and room for one more word.
        let bottom: Vec<StreamBeat> = self
            .fifos
            .iter()
            .map(|f| StreamBeat {
                payload: f.front().map_or(Lane::Empty, |&w| Lane::Word(w)),
                valid: !f.is_empty(),
                ready: downstream_ready,
            })
            .collect();
        let upstream_ready = self.fifos.iter().all(|f| f.len() < self.cfg.fifo_depth);
        let fired = upstream_ready && top.iter().chain(right).all(|b| b.valid);

        if self.trace.is_some() {
            for (j, beat) in top.iter().enumerate() {
                self.record(format!("top[{j}]"), &StreamBeat { ready: fired, ..*beat });
            }
            for (i, beat) in right.iter().enumerate() {
                self.record(format!("right[{i}]"), &StreamBeat { ready: fired, ..*beat });
            }
            for (j, beat) in bottom.iter().enumerate() {
                self.record(format!("bottom[{j}]"), beat);
            }
        }

        for (fifo, beat) in self.fifos.iter_mut().zip(&bottom) {
            if beat.valid && beat.ready {
                fifo.pop_front();
            }
        }
        if fired {
            self.fire(top, right);
        }
        self.cycle += 1;
        StepOutput {
            bottom,
            upstream_ready,
            fired,
        }
    }

    fn fire(&mut self, top: &[StreamBeat], right: &[StreamBeat]) {
        let (rows, cols) = (self.cfg.rows, self.cfg.cols);
        let fmt = self.cfg.dot_cfg.operand_format;
        let out_fmt = self.cfg.dot_cfg.output_format;
        let spec = self.cfg.dot_cfg.accumulator;
        // Every PE reads its neighbours' registers as they were at the
        // start of the cycle.
        let prev: Vec<(Lane, Lane)> = self.pes.iter().map(|p| (p.a, p.b)).collect();
        for j in 0..cols {
            if self.draining[j] > 0 {
                // Shift the column down one PE; the bottom one leaves
                // through the rounder.
                let bottom = &self.pes[(rows - 1) * cols + j].acc;
                self.fifos[j].push_back(bottom.render(&out_fmt));
                for i in (1..rows).rev() {
                    self.pes[i * cols + j].acc = self.pes[(i - 1) * cols + j].acc.clone();
                }
                self.pes[j].acc = AccumulatorState::new(spec);
                self.draining[j] -= 1;
            }
        }
        for i in 0..rows {
            for j in 0..cols {
                let b_in = if i == 0 { top[j].payload } else { prev[(i - 1) * cols + j].1 };
                let a_in = if j + 1 == cols { right[i].payload } else { prev[i * cols + j + 1].0 };
                let pe = &mut self.pes[i * cols + j];
                if let (Lane::Word(a), Lane::Word(b)) = (a_in, b_in) {
                    pe.acc.accumulate_product(&decode(a, &fmt), &decode(b, &fmt));
                }
                pe.a = a_in;
                pe.b = b_in;
                if i + 1 == rows && b_in == Lane::Drain {
                    // Start the drain right away: the first result leaves
                    // on the next cycle.
                    self.draining[j] = rows;
                }
            }
        }
    }
}

/// Per-cycle handshake decisions of the environment around the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StallDecision {
    /// Whether the operand feeders offer their beats this cycle.
    pub inputs_valid: bool,
    /// Whether the consumer takes FIFO heads this cycle.
    pub downstream_ready: bool,
}

impl StallDecision {
    pub const NONE: StallDecision = StallDecision {
        inputs_valid: true,
        downstream_ready: true,
    };
}

/// `A * B` on the array with no stalls; returns the product (in the output
/// format) and the number of cycles.
pub fn run_gemm_systolic(a: &MatrixBuffer, b: &MatrixBuffer, cfg: &ArrayConfig) -> Result<(MatrixBuffer, u64), GemmError> {
    run_gemm_systolic_with(a, b, cfg, |_| StallDecision::NONE)
}

/// As [`run_gemm_systolic`], with `stall(cycle)` deciding the handshake
/// signals on every cycle.
pub fn run_gemm_systolic_with(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    cfg: &ArrayConfig,
    stall: impl FnMut(u64) -> StallDecision,
) -> Result<(MatrixBuffer, u64), GemmError> {
    let (c, sim) = run_traced(a, b, cfg, stall, false)?;
    Ok((c, sim.cycle()))
}

/// As [`run_gemm_systolic_with`], also returning the CSV trace.
pub fn run_gemm_systolic_traced(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    cfg: &ArrayConfig,
    stall: impl FnMut(u64) -> StallDecision,
) -> Result<(MatrixBuffer, u64, String), GemmError> {
    let (c, sim) = run_traced(a, b, cfg, stall, true)?;
    Ok((c, sim.cycle(), sim.trace_csv()))
}

fn run_traced(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    cfg: &ArrayConfig,
    mut stall: impl FnMut(u64) -> StallDecision,
    trace: bool,
) -> Result<(MatrixBuffer, ArraySim), GemmError> {
    if a.cols() != b.rows() {
        return Err(GemmError::InnerMismatch {
            a_rows: a.rows(),
            a_cols: a.cols(),
            b_rows: b.rows(),
            b_cols: b.cols(),
        });
    }
    let fmt = cfg.dot_cfg.operand_format;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (rows, cols) = (cfg.rows, cfg.cols);
    let mut sim = ArraySim::build(*cfg);
    if trace {
        sim.enable_trace();
    }
    let mut c = MatrixBuffer::zeros(m, n, cfg.dot_cfg.output_format);

    // Output tiles in row-major order; edge tiles simply see zero operands.
    let tiles: Vec<(usize, usize)> = (0..m.div_ceil(rows))
        .flat_map(|ti| (0..n.div_ceil(cols)).map(move |tj| (ti * rows, tj * cols)))
        .collect();
    let operand = |mat: &MatrixBuffer, r: usize, col: usize| {
        if r < mat.rows() && col < mat.cols() {
            mat.get(r, col)
        } else {
            fmt.zero()
        }
    };
    // Per column: how many results have been collected so far.
    let mut collected = vec![0usize; cols];
    let expected = tiles.len() * rows;

    let mut tile = 0;
    // Fired cycles since the current tile started loading.
    let mut t = 0usize;
    // Longest skew plus the drain token plus the shift-out of the last
    // column; after this many fired cycles the tile is fully drained.
    let tile_len = k + (cols - 1) + rows + rows;
    while collected.iter().any(|&n| n < expected) {
        let decision = stall(sim.cycle());
        let loading = tile < tiles.len();
        let (r0, c0) = tiles.get(tile).copied().unwrap_or((0, 0));
        let top: Vec<StreamBeat> = (0..cols)
            .map(|j| {
                let lane = if !loading {
                    Lane::Empty
                } else {
                    match t.checked_sub(cols - 1 - j) {
                        Some(s) if s < k => Lane::Word(operand(b, s, c0 + j)),
                        Some(s) if s == k => Lane::Drain,
                        _ => Lane::Empty,
                    }
                };
                StreamBeat {
                    payload: lane,
                    valid: decision.inputs_valid,
                    ready: false,
                }
            })
            .collect();
        let right: Vec<StreamBeat> = (0..rows)
            .map(|i| {
                let lane = match t.checked_sub(i) {
                    Some(s) if loading && s < k => Lane::Word(operand(a, r0 + i, s)),
                    _ => Lane::Empty,
                };
                StreamBeat {
                    payload: lane,
                    valid: decision.inputs_valid,
                    ready: false,
                }
            })
            .collect();
        let out = sim.step(&top, &right, decision.downstream_ready);
        for (j, beat) in out.bottom.iter().enumerate() {
            if beat.valid && beat.ready {
                let Lane::Word(w) = beat.payload else {
                    unreachable!("FIFOs hold words only")
                };
                let e = collected[j];
                let (tr, tc) = tiles[e / rows];
                let (r, col) = (tr + rows - 1 - e % rows, tc + j);
                if r < m && col < n {
                    c.set(r, col, w);
                }
                collected[j] += 1;
            }
        }
        if out.fired && loading {
            t += 1;
            if t == tile_len {
                debug_assert!(!sim.is_draining());
                tile += 1;
                t = 0;
            }
        }
    }
    Ok((c, sim))
}
