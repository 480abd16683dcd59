//! Discrete-event simulation of a two-terminal bus corridor plus a soft
//! actor-critic trainer that learns station holding times.
//!
//! The corridor has 22 stops per direction (two terminals, 20 intermediate
//! stops). Buses run a fixed timetable over a 13 hour service day while
//! passengers arrive as Poisson streams between intermediate stops and
//! segment speeds fluctuate around hourly means. A holding controller is
//! consulted every time a bus finishes boarding at an intermediate stop and
//! may delay its departure by up to a minute; the reward for that decision
//! is realized later, once the surrounding headways are observable.
//!
//! Module layout mirrors the data flow:
//!
//! * [`scenario`]: static inputs (stops, demand matrices, speed profiles,
//!   timetables) with CSV round-tripping and a synthetic generator.
//! * [`stochastic`]: seeded, stream-isolated sampling of passenger arrivals
//!   and segment speeds.
//! * [`sim`]: the event loop itself, producing a replayable episode log.
//! * [`env`]: decision states, the headway reward, and the bookkeeping that
//!   turns logged decisions into replay tuples once outcomes land.
//! * [`nn`]: embeddings, small dense networks, and a tape autodiff just big
//!   enough for the training losses.
//! * [`sac`]: the entropy-regularized actor-critic trainer and evaluation.
//! * [`analytics`]: bunching detection and the summary series used for
//!   reports.

pub mod analytics;
pub mod env;
pub mod nn;
pub mod sac;
pub mod scenario;
pub mod sim;
pub mod stochastic;

/// Hard ceiling on concurrently known vehicles. Bus ids index an embedding
/// table, so the ceiling is fixed at build time rather than per scenario.
pub const MAX_FLEET: usize = 40;
