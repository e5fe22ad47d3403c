//! Live sandbox: one WebSocket client plays the hand, the server runs the
//! MPC loop against a simulated robot and streams state frames.
//!
//! Ingestion, the control loop and the writer are separate tasks. Hand poses
//! go through a latest-wins mailbox; frames go out through a watch channel,
//! so a slow client sees fewer frames and never delays a cycle.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use collab_mpc::costs::Weights;
use collab_mpc::geometry::ObstacleWorld;
use collab_mpc::kinematics::{franka_like, SerialChain};
use collab_mpc::mpc::{Mailbox, MpcController, Observation};
use collab_mpc::sim::{standard_obstacle_fixture, SimConfig, Simulator};
use futures_util::{SinkExt, StreamExt};
use nalgebra::{DVector, Vector3};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::time::MissedTickBehavior;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use crate::config::{RunConfig, ScenarioChoice};
use crate::error::{CliError, CliResult};
use crate::wire::{parse_client, ClientMessage, ServerMessage, StateFrame, StateMetrics};

/// Latest hand pose and its arrival time on the session clock.
#[derive(Debug, Clone, Copy)]
pub struct HandSample {
    pub pos: Vector3<f64>,
    pub stamp_ms: f64,
}

enum Control {
    Reset(Option<ScenarioChoice>),
    SetParams(Weights),
}

/// Simulated robot plus controller. The robot tracks each command exactly,
/// so it advances one planning step per cycle.
pub struct Sandbox {
    chain: Arc<SerialChain>,
    sim: SimConfig,
    scenario: ScenarioChoice,
    world: Arc<ObstacleWorld>,
    default_hand: Vector3<f64>,
    q: DVector<f64>,
    ctrl: MpcController,
    cycle: usize,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl Sandbox {
    pub fn new(sim: SimConfig, scenario: ScenarioChoice) -> CliResult<Self> {
        let chain = Arc::new(franka_like());
        let (world, q, hand) = load_scenario(&chain, &sim, &scenario)?;
        let world = Arc::new(world);
        let ctrl = MpcController::new(chain.clone(), world.clone(), sim.weights.clone(), sim.mpc.clone())?;
        Ok(Self { chain, sim, scenario, world, default_hand: hand, q, ctrl, cycle: 0 })
    }

    pub fn reset(&mut self, scenario: Option<ScenarioChoice>) -> CliResult<()> {
        let scenario = scenario.unwrap_or_else(|| self.scenario.clone());
        let weights = self.ctrl.weights().clone();
        let (world, q, hand) = load_scenario(&self.chain, &self.sim, &scenario)?;
        self.world = Arc::new(world);
        self.ctrl = MpcController::new(self.chain.clone(), self.world.clone(), weights, self.sim.mpc.clone())?;
        self.scenario = scenario;
        self.default_hand = hand;
        self.q = q;
        self.cycle = 0;
        Ok(())
    }

    pub fn set_weights(&mut self, w: Weights) -> CliResult<()> {
        Ok(self.ctrl.set_weights(w)?)
    }

    /// One control cycle at session time `now_s`. The hand is treated as
    /// continuously observed at its last reported pose.
    pub fn tick(&mut self, hand: Option<HandSample>, now_s: f64) -> StateFrame {
        let pos = hand.map_or(self.default_hand, |h| h.pos);
        let out = self.ctrl.step(&Observation::new(self.q.clone(), pos, now_s), now_s);
        self.q = out.command;
        let ee = self.chain.forward_kinematics(&self.q).map(|p| p.translation).unwrap_or_else(|_| Vector3::repeat(f64::NAN));
        let d = &out.diagnostics;
        let frame = StateFrame {
            cycle: self.cycle,
            robot_q: self.q.iter().copied().collect(),
            ee: arr(&ee),
            hand: arr(&pos),
            plan_ee: self.ctrl.planned_ee_path().iter().map(arr).collect(),
            agent_pred: self.ctrl.predicted_agent_path().iter().map(arr).collect(),
            obstacles: self.world.primitives.clone(),
            phase: out.phase,
            metrics: StateMetrics {
                cost: d.cost.is_finite().then_some(d.cost),
                solve_ms: d.solve_ms,
                iterations: d.iterations,
                distance: (ee - pos).norm(),
                flag: d.flag,
                hand_stamp_ms: hand.map(|h| h.stamp_ms),
            },
        };
        self.cycle += 1;
        frame
    }
}

fn load_scenario(
    chain: &Arc<SerialChain>,
    sim: &SimConfig,
    choice: &ScenarioChoice,
) -> CliResult<(ObstacleWorld, DVector<f64>, Vector3<f64>)> {
    choice.validate()?;
    Ok(match choice {
        ScenarioChoice::Named(n) if n == "empty" => {
            let (_, q, hand) = standard_obstacle_fixture();
            (ObstacleWorld::empty(), q, hand)
        }
        ScenarioChoice::Named(_) => standard_obstacle_fixture(),
        ScenarioChoice::Seed(seed) => {
            let sc = Simulator::new(chain.clone(), sim.clone())?.draw_scenario(*seed)?;
            (sc.world, sc.robot_start, sc.agent_start)
        }
    })
}

/// Binds the listener; an occupied port is an I/O error.
pub async fn bind(addr: &str) -> CliResult<TcpListener> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => CliError::Io(format!("port in use: {addr}")),
        _ => CliError::Io(format!("{addr}: {e}")),
    })
}

/// Accepts connections forever. One session at a time; a second client
/// gets an error frame and is closed.
pub async fn run(listener: TcpListener, cfg: RunConfig) -> CliResult<()> {
    // Fail on a bad scenario before anyone connects.
    Sandbox::new(cfg.sim.clone(), cfg.serve.scenario.clone())?;
    let busy = Arc::new(AtomicBool::new(false));
    loop {
        let (stream, peer) = listener.accept().await?;
        let busy = busy.clone();
        let cfg = cfg.clone();
        tokio::spawn(async move {
            let mut ws = match tokio_tungstenite::accept_async(stream).await {
                Ok(ws) => ws,
                Err(e) => {
                    log::warn!("handshake with {peer} failed: {e}");
                    return;
                }
            };
            if busy.swap(true, Ordering::SeqCst) {
                log::info!("rejecting {peer}: session in progress");
                let busy_msg = ServerMessage::error("busy: another session is active", 0.0).to_json();
                let _ = ws.send(Message::text(busy_msg)).await;
                let _ = ws.close(None).await;
                return;
            }
            let _guard = BusyGuard(busy);
            log::info!("session with {peer} started");
            match session(ws, &cfg).await {
                Ok(()) => log::info!("session with {peer} ended"),
                Err(e) => log::warn!("session with {peer} ended: {e}"),
            }
        });
    }
}

struct BusyGuard(Arc<AtomicBool>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn session(ws: WebSocketStream<TcpStream>, cfg: &RunConfig) -> CliResult<()> {
    let clock = Instant::now();
    let ms = move || clock.elapsed().as_secs_f64() * 1e3;
    let sandbox = Sandbox::new(cfg.sim.clone(), cfg.serve.scenario.clone())?;
    let (mut sink, mut source) = ws.split();
    let hand = Arc::new(Mailbox::<HandSample>::new());
    let (ctrl_tx, ctrl_rx) = mpsc::channel::<Control>(8);
    let (err_tx, mut err_rx) = mpsc::channel::<String>(16);
    let (frame_tx, mut frame_rx) = watch::channel::<Option<Arc<String>>>(None);

    let period = Duration::from_secs_f64(1.0 / cfg.serve.rate_hz);
    let control = tokio::spawn(control_loop(sandbox, hand.clone(), ctrl_rx, frame_tx, err_tx.clone(), period, clock));

    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                changed = frame_rx.changed() => {
                    if changed.is_err() {
                        break;
                    }
                    match frame_rx.borrow_and_update().clone() {
                        Some(f) => f.as_str().to_owned(),
                        None => continue,
                    }
                }
                Some(e) = err_rx.recv() => ServerMessage::error(e, ms()).to_json(),
            };
            if sink.send(Message::text(text)).await.is_err() {
                break;
            }
        }
    });

    while let Some(msg) = source.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                let _ = err_tx.try_send("binary frames are not supported".into());
                continue;
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        match parse_client(&text) {
            Ok(ClientMessage::HandPose { t }) => hand.post(HandSample { pos: Vector3::from(t), stamp_ms: ms() }),
            Ok(ClientMessage::Reset { scenario }) => {
                if ctrl_tx.try_send(Control::Reset(scenario)).is_err() {
                    let _ = err_tx.try_send("too many pending control messages".into());
                }
            }
            Ok(ClientMessage::SetParams { weights }) => {
                if ctrl_tx.try_send(Control::SetParams(weights)).is_err() {
                    let _ = err_tx.try_send("too many pending control messages".into());
                }
            }
            Err(e) => {
                log::debug!("rejected client message: {e}");
                let _ = err_tx.try_send(e);
            }
        }
    }
    control.abort();
    writer.abort();
    Ok(())
}

async fn control_loop(
    sandbox: Sandbox,
    hand: Arc<Mailbox<HandSample>>,
    mut ctrl_rx: mpsc::Receiver<Control>,
    frame_tx: watch::Sender<Option<Arc<String>>>,
    err_tx: mpsc::Sender<String>,
    period: Duration,
    clock: Instant,
) {
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let mut sandbox = Some(sandbox);
    loop {
        interval.tick().await;
        let mut controls = Vec::new();
        while let Ok(c) = ctrl_rx.try_recv() {
            controls.push(c);
        }
        // A reset also forgets the hand, so the new scenario starts from its
        // default pose.
        if controls.iter().any(|c| matches!(c, Control::Reset(_))) {
            hand.take();
        }
        let mut sb = sandbox.take().expect("sandbox is returned every cycle");
        let h = hand.latest();
        let joined = tokio::task::spawn_blocking(move || {
            let errors: Vec<String> = controls
                .into_iter()
                .filter_map(|c| match c {
                    Control::Reset(s) => sb.reset(s).err(),
                    Control::SetParams(w) => sb.set_weights(w).err(),
                })
                .map(|e| e.to_string())
                .collect();
            let frame = sb.tick(h, clock.elapsed().as_secs_f64());
            (sb, frame, errors)
        })
        .await;
        let Ok((sb, frame, errors)) = joined else {
            log::error!("control cycle panicked; ending session");
            return;
        };
        sandbox = Some(sb);
        for e in errors {
            let _ = err_tx.try_send(e);
        }
        let msg = ServerMessage::state(frame, clock.elapsed().as_secs_f64() * 1e3);
        if frame_tx.send(Some(Arc::new(msg.to_json()))).is_err() {
            return;
        }
    }
}

/// Entry point for `collab serve`.
pub async fn serve(cfg: RunConfig) -> CliResult<()> {
    let listener = bind(&cfg.serve.addr).await?;
    let addr = listener.local_addr()?;
    println!("listening on ws://{addr}");
    run(listener, cfg).await
}
