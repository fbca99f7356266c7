//! Run lifecycle: the step loop, per-agent scheduling and task execution.
//!
//! One step runs in this order:
//! 1. due interventions are applied;
//! 2. messages queued for this step are delivered;
//! 3. battles completing now are settled, then stale listings expire;
//! 4. offline players roll for a session (first step of a day only);
//! 5. every player at a decision point plans against a snapshot of the
//!    world (possibly on several threads), then actions are executed one
//!    player at a time in ascending uid;
//! 6. session counters tick down.
//!
//! Planning only reads the snapshot and all writes happen in uid order, so
//! the event log does not depend on the number of workers.

pub mod config;
pub mod pool;
mod world;

pub use config::{
    map_time, ConfigError, EconomyConfig, PolicyBinding, PolicyKind, PopulationConfig, RunConfig, BUILTIN_CONFIGS,
    CONFIG_VERSION,
};
pub use pool::{OutboundPool, PoolError, SlotLease};
pub use world::{AgentRuntime, MoneySupply, PendingTask, TaskKind, WorldState};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::battle::{pay_reward, resolve_match, BattleError, BattleModel};
use crate::domain::{
    transition_path, Action, AgentState, Credits, Event, EventPayload, ItemId, ItemInstance, Ledger, SimTime, Uid,
};
use crate::economy::{choose_sell_channel, Catalog, Category, Channels, Economy, EconomyError, SellChannel};
use crate::intervention::{InterventionError, InterventionKind, InterventionRequest, InterventionTimeline};
use crate::messaging::{MessageBus, MqttBridge, Sender, Topic};
use crate::policy::{
    ActionDecision, ConstantPolicy, HeuristicPolicy, HeuristicWeights, OutcomeSummary, Policy, PolicyContext,
    PolicyError, RemotePolicy, ReplayPolicy, CONTEXT_ACTIONS, CONTEXT_OUTCOMES,
};
use crate::rng::{agent_stream, Purpose};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("policy setup: {0}")]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Battle(#[from] BattleError),
    #[error("run is finished at step {0}")]
    Finished(u64),
    #[error("world does not match config: {0}")]
    Mismatch(String),
    #[error("step sink: {0}")]
    Sink(String),
}

struct Emitter {
    seq: u64,
    time: SimTime,
    events: Vec<Event>,
}

impl Emitter {
    fn emit(&mut self, uid: Option<Uid>, payload: EventPayload) {
        self.events.push(Event {
            seq: self.seq,
            step: self.time,
            uid,
            payload,
        });
        self.seq += 1;
    }
}

pub struct Simulation {
    config: RunConfig,
    catalog: Catalog,
    model: BattleModel,
    heuristic: Arc<HeuristicPolicy>,
    policies: Vec<Arc<dyn Policy>>,
    pool: Arc<OutboundPool>,
    bridge: Option<MqttBridge>,
    world: WorldState,
}

impl Simulation {
    /// Fresh run at step 0.
    pub fn new(config: RunConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let catalog = config.catalog()?;
        let profiles = config.profiles()?;
        let ledger = Ledger::new(
            profiles.iter().map(|p| (p.uid, config.economy.initial_balance)),
            config.economy.initial_reserve,
        );
        let mut economy = Economy::new(ledger);
        let starter = catalog
            .of_category(Category::Gear)
            .min_by_key(|i| (i.npc_price, i.item_id))
            .map(|i| i.item_id);
        if let Some(gear) = starter {
            for p in &profiles {
                economy.mint(p.uid, gear);
            }
        }
        let mut bus = MessageBus::new(profiles.iter().map(|p| p.uid));
        for (gid, members) in &config.groups {
            bus.set_group(gid.clone(), members.iter().map(|u| Uid(*u)))
                .map_err(|e| ConfigError::Invalid(format!("group {gid}: {e}")))?;
        }
        let params = config.initial_params(&catalog);
        let mut timeline = InterventionTimeline::new();
        for req in &config.interventions {
            timeline
                .schedule(req.clone(), 0, &params)
                .map_err(|e| ConfigError::Invalid(format!("intervention: {e}")))?;
        }
        let world = WorldState {
            now: 0,
            next_seq: 1,
            black_market_opened_day: params.flags.black_market_enabled.then_some(0),
            agents: profiles.into_iter().map(AgentRuntime::new).collect(),
            economy,
            params,
            timeline,
            bus,
        };
        Self::from_world(config, world)
    }

    /// Rebuilds a run around a previously captured world.
    pub fn from_world(config: RunConfig, world: WorldState) -> Result<Self, EngineError> {
        let model = match &config.battle_model {
            Some(p) => BattleModel::load(p)?,
            None => config.cluster_table()?.true_model(),
        };
        Self::restore(config, world, model)
    }

    /// Rebuilds a run from a captured world and the battle model it used.
    pub fn restore(config: RunConfig, world: WorldState, model: BattleModel) -> Result<Self, EngineError> {
        config.validate()?;
        let catalog = config.catalog()?;
        if world.agents.iter().enumerate().any(|(i, a)| a.uid().0 as usize != i) {
            return Err(EngineError::Mismatch("agents must be indexed by uid".into()));
        }
        let weights = config.heuristic.clone().unwrap_or_default();
        let heuristic = Arc::new(HeuristicPolicy::new(weights, catalog.cheapest_price()));
        let pool = OutboundPool::new(config.max_outbound_inflight);
        let policies = build_policies(&config, &world, &heuristic, &pool)?;
        let bridge = match &config.mqtt_bridge {
            Some(b) => match MqttBridge::new(b.clone(), &config.run_id, pool.clone()) {
                Ok(br) => Some(br),
                Err(e) => {
                    tracing::warn!(error = %e, "mqtt bridge disabled");
                    None
                }
            },
            None => None,
        };
        Ok(Simulation {
            config,
            catalog,
            model,
            heuristic,
            policies,
            pool,
            bridge,
            world,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn model(&self) -> &BattleModel {
        &self.model
    }

    pub fn heuristic(&self) -> &Arc<HeuristicPolicy> {
        &self.heuristic
    }

    pub fn pool(&self) -> &Arc<OutboundPool> {
        &self.pool
    }

    /// Next step to execute.
    pub fn now(&self) -> u64 {
        self.world.now
    }

    pub fn is_finished(&self) -> bool {
        self.world.now >= self.config.total_steps()
    }

    /// Schedules an intervention; without `at_step` it lands on the next
    /// step that has not executed yet.
    pub fn schedule(&mut self, req: InterventionRequest) -> Result<u64, InterventionError> {
        self.world.timeline.schedule(req, self.world.now, &self.world.params)
    }

    pub fn advance(&mut self, n_steps: u64) -> Result<Vec<Event>, EngineError> {
        let mut all = Vec::new();
        self.advance_with(n_steps, |_, evs| {
            all.extend_from_slice(evs);
            Ok(())
        })?;
        Ok(all)
    }

    /// Advances up to `n_steps` (stopping at the end of the run), handing
    /// each step's events to `sink` once the step is complete.
    pub fn advance_with(
        &mut self,
        n_steps: u64,
        mut sink: impl FnMut(u64, &[Event]) -> Result<(), EngineError>,
    ) -> Result<u64, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished(self.world.now));
        }
        let mut done = 0;
        while done < n_steps && !self.is_finished() {
            let t = self.world.now;
            let events = self.step()?;
            sink(t, &events)?;
            done += 1;
        }
        Ok(done)
    }

    fn rng(&self, uid: Uid, purpose: Purpose) -> rand_chacha::ChaCha8Rng {
        agent_stream(self.config.seed, uid.0, self.world.now, purpose)
    }

    /// Executes exactly one step.
    pub fn step(&mut self) -> Result<Vec<Event>, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished(self.world.now));
        }
        let t = self.world.now;
        let time = SimTime::from_abs(t, self.config.steps_per_day);
        let mut out = Emitter {
            seq: self.world.next_seq,
            time,
            events: Vec::new(),
        };

        self.apply_interventions(&mut out);
        self.deliver_messages(&mut out);
        for i in 0..self.world.agents.len() {
            if self.world.agents[i].pending_task.is_some_and(|p| p.completes_at == t) {
                self.complete_battle(i, &mut out)?;
            }
        }
        for l in self
            .world
            .economy
            .expire_listings(t, self.config.economy.listing_ttl_steps)
        {
            out.emit(
                Some(l.seller),
                EventPayload::ListingCancelled {
                    listing_id: l.listing_id,
                    item: l.item,
                },
            );
        }
        if time.step_in_day == 0 {
            self.session_rolls(&mut out);
        }

        let ready: Vec<usize> = (0..self.world.agents.len())
            .filter(|&i| self.world.agents[i].is_decision_point())
            .collect();
        let contexts: Vec<PolicyContext> = ready.iter().map(|&i| self.context(i, time)).collect();
        let decisions = self.plan(&ready, &contexts);
        for ((&i, ctx), (decision, failure)) in ready.iter().zip(&contexts).zip(decisions) {
            self.execute(i, ctx, decision, failure, &mut out);
        }

        for a in &mut self.world.agents {
            if a.state != AgentState::Offline {
                a.session_steps_remaining -= 1;
            }
        }
        self.record_history(&out.events);
        self.world.now += 1;
        self.world.next_seq = out.seq;
        Ok(out.events)
    }

    fn apply_interventions(&mut self, out: &mut Emitter) {
        let was_open = self.world.params.flags.black_market_enabled;
        let applied = self.world.timeline.apply_due(self.world.now, &mut self.world.params);
        for iv in applied {
            out.emit(
                None,
                EventPayload::InterventionApplied {
                    intervention_id: iv.intervention_id,
                    change: iv.kind.clone(),
                },
            );
            if iv.announce || matches!(iv.kind, InterventionKind::BroadcastEvent { .. }) {
                self.broadcast(iv.kind.describe());
            }
        }
        let open = self.world.params.flags.black_market_enabled;
        if open && !was_open {
            self.world.black_market_opened_day = Some(out.time.day);
        } else if !open {
            self.world.black_market_opened_day = None;
        }
    }

    fn broadcast(&mut self, body: String) {
        let msg = self
            .world
            .bus
            .publish(Topic::Broadcast, Sender::System, body, self.world.now)
            .expect("system broadcasts always route");
        if let Some(b) = &self.bridge {
            if let Err(e) = b.publish(&msg) {
                tracing::warn!(error = %e, "mqtt publish failed");
            }
        }
    }

    fn deliver_messages(&mut self, out: &mut Emitter) {
        let now = self.world.now;
        for a in &mut self.world.agents {
            for m in self.world.bus.drain(a.profile.uid, now) {
                if m.topic == Topic::Broadcast {
                    a.pending_broadcasts.push(m.body.clone());
                }
                out.emit(
                    Some(a.profile.uid),
                    EventPayload::MessageDelivered {
                        msg_id: m.msg_id,
                        topic: m.topic,
                        body: m.body,
                    },
                );
            }
        }
    }

    fn complete_battle(&mut self, i: usize, out: &mut Emitter) -> Result<(), EngineError> {
        let uid = self.world.agents[i].uid();
        let task = self.world.agents[i]
            .pending_task
            .take()
            .expect("caller checked the pending task");
        let mut rng = self.rng(uid, Purpose::Battle);
        let mut outcome = resolve_match(
            &self.model,
            &self.world.agents[i].profile,
            task.match_index,
            self.world.params.lambda_win,
            out.time,
            &mut rng,
        )?;
        pay_reward(&mut self.world.economy.ledger, &mut outcome)?;
        out.emit(Some(uid), EventPayload::BattleResolved { outcome: outcome.clone() });
        let econ = &self.config.economy;
        if outcome.win {
            let loot: Vec<ItemId> = self.catalog.of_category(Category::Loot).map(|i| i.item_id).collect();
            if rng.random::<f64>() < econ.p_loot {
                if let Some(&item) = loot.choose(&mut rng) {
                    let inst = self.world.economy.mint(uid, item);
                    out.emit(Some(uid), EventPayload::LootAcquired { item: inst });
                }
            }
        } else if rng.random::<f64>() < econ.p_gear_loss {
            if let Some(gear) = self.best_gear(uid) {
                let inst = self
                    .world
                    .economy
                    .destroy(uid, gear.id)
                    .expect("gear is in the inventory");
                out.emit(Some(uid), EventPayload::ItemLost { item: inst });
            }
        }
        self.transition(i, AgentState::Online, out);
        let a = &mut self.world.agents[i];
        a.last_outcomes.push_back(OutcomeSummary {
            match_index: outcome.match_index,
            win: outcome.win,
            income: outcome.income,
            step: out.time.abs_step,
        });
        while a.last_outcomes.len() > CONTEXT_OUTCOMES {
            a.last_outcomes.pop_front();
        }
        Ok(())
    }

    fn session_rolls(&mut self, out: &mut Emitter) {
        for i in 0..self.world.agents.len() {
            let a = &self.world.agents[i];
            if a.state != AgentState::Offline || a.pending_task.is_some() {
                continue;
            }
            let uid = a.uid();
            let mut rng = self.rng(uid, Purpose::Session);
            let roll = rng.random::<f64>() < a.profile.activeness;
            let starts = self.policies[i].session_start(uid, self.world.now).unwrap_or(roll);
            if starts {
                let mean = a.profile.session_length_mean.max(1) as i64;
                let length = rng.random_range((mean / 2).max(1)..=mean + mean / 2);
                out.emit(Some(uid), EventPayload::SessionStart);
                self.transition(i, AgentState::Online, out);
                self.world.agents[i].session_steps_remaining = length;
            } else {
                out.emit(
                    Some(uid),
                    EventPayload::ActionChosen {
                        action: Action::Offline,
                        state: AgentState::Offline,
                        rationale_text: Some("offline: no session today".into()),
                    },
                );
                push_action(&mut self.world.agents[i], Action::Offline);
            }
        }
    }

    fn channels(&self) -> Channels {
        Channels::from(self.world.params.flags)
    }

    fn context(&self, i: usize, time: SimTime) -> PolicyContext {
        let a = &self.world.agents[i];
        PolicyContext {
            profile: a.profile.clone(),
            state: a.state,
            balance: self.world.economy.balance(a.uid()),
            last_outcomes: a.last_outcomes.iter().copied().collect(),
            recent_actions: a.recent_actions.iter().copied().collect(),
            broadcasts_pending: a.pending_broadcasts.clone(),
            channels: self.channels(),
            time,
            session_steps_remaining: a.session_steps_remaining,
            surplus_tradables: self.surplus(a.uid()).len() as u32,
        }
    }

    /// Tradable items a player can spare, most valuable first: loot, then
    /// every gear piece except the best one.
    fn surplus(&self, uid: Uid) -> Vec<ItemInstance> {
        let best = self.best_gear(uid);
        let mut items: Vec<(Credits, ItemInstance)> = self
            .world
            .economy
            .inventory(uid)
            .iter()
            .filter(|inst| Some(inst.id) != best.map(|b| b.id))
            .filter_map(|inst| {
                let item = self.catalog.get(inst.item)?;
                (item.tradable && matches!(item.category, Category::Loot | Category::Gear))
                    .then(|| (self.price(inst.item), *inst))
            })
            .collect();
        items.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        items.into_iter().map(|(_, i)| i).collect()
    }

    fn best_gear(&self, uid: Uid) -> Option<ItemInstance> {
        self.world
            .economy
            .inventory(uid)
            .iter()
            .filter(|inst| self.catalog.get(inst.item).is_some_and(|i| i.category == Category::Gear))
            .max_by(|a, b| self.price(a.item).cmp(&self.price(b.item)).then(b.id.cmp(&a.id)))
            .copied()
    }

    fn price(&self, item: ItemId) -> Credits {
        self.world.params.npc_prices.get(&item).copied().unwrap_or_else(|| {
            self.catalog.get(item).map_or(0, |i| i.npc_price)
        })
    }

    fn plan(&self, ready: &[usize], contexts: &[PolicyContext]) -> Vec<(ActionDecision, Option<String>)> {
        let decide_one = |k: usize| {
            let i = ready[k];
            let ctx = &contexts[k];
            let uid = ctx.profile.uid;
            let policy = &self.policies[i];
            let started = Instant::now();
            let mut rng = self.rng(uid, Purpose::Decide);
            let (mut d, failure) = match policy.decide(ctx, &mut rng) {
                Ok(d) => (d, None),
                Err(e) => {
                    let mut rng = self.rng(uid, Purpose::Decide);
                    (policy.fallback(ctx, &mut rng), Some(e.to_string()))
                }
            };
            d.latency_ms = started.elapsed().as_secs_f64() * 1e3;
            (d, failure)
        };
        let workers = self.config.workers.min(ready.len()).max(1);
        if workers == 1 {
            return (0..ready.len()).map(decide_one).collect();
        }
        let mut slots: Vec<Option<(ActionDecision, Option<String>)>> = vec![None; ready.len()];
        let chunk = ready.len().div_ceil(workers);
        std::thread::scope(|s| {
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let decide_one = &decide_one;
                s.spawn(move || {
                    for (j, slot) in part.iter_mut().enumerate() {
                        *slot = Some(decide_one(c * chunk + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot planned")).collect()
    }

    fn transition(&mut self, i: usize, to: AgentState, out: &mut Emitter) {
        let a = &mut self.world.agents[i];
        for (from, to) in transition_path(a.state, to) {
            out.emit(Some(a.profile.uid), EventPayload::StateTransition { from, to });
        }
        a.state = to;
    }

    fn execute(
        &mut self,
        i: usize,
        ctx: &PolicyContext,
        decision: ActionDecision,
        failure: Option<String>,
        out: &mut Emitter,
    ) {
        let uid = ctx.profile.uid;
        if let Some(reason) = failure {
            out.emit(Some(uid), EventPayload::PolicyFailure { reason });
        }
        let action = decision.action;
        out.emit(
            Some(uid),
            EventPayload::ActionChosen {
                action,
                state: ctx.state,
                rationale_text: decision.rationale.clone(),
            },
        );
        {
            let a = &mut self.world.agents[i];
            a.latest_rationale = decision.rationale;
            a.pending_broadcasts.clear();
            push_action(a, action);
        }
        match action {
            Action::Offline => {
                self.transition(i, AgentState::Offline, out);
                out.emit(Some(uid), EventPayload::SessionEnd);
                self.world.agents[i].session_steps_remaining = 0;
            }
            Action::Battle => {
                self.transition(i, AgentState::Battle, out);
                let consumable = self
                    .world
                    .economy
                    .inventory(uid)
                    .iter()
                    .find(|inst| {
                        self.catalog
                            .get(inst.item)
                            .is_some_and(|it| it.category == Category::Consumable)
                    })
                    .copied();
                if let Some(c) = consumable {
                    let inst = self.world.economy.destroy(uid, c.id).expect("owned consumable");
                    out.emit(Some(uid), EventPayload::ItemConsumed { item: inst });
                }
                let a = &mut self.world.agents[i];
                a.match_count_this_season += 1;
                assert!(a.pending_task.is_none(), "agent {uid} already has a task");
                a.pending_task = Some(PendingTask {
                    kind: TaskKind::Battle,
                    completes_at: self.world.now + self.config.battle_duration_steps,
                    match_index: a.match_count_this_season,
                });
            }
            Action::Buy => {
                self.transition(i, AgentState::Market, out);
                if let Err(reason) = self.buy(i, out) {
                    out.emit(Some(uid), EventPayload::ActionRejected { action, reason });
                }
            }
            Action::Sell => {
                self.transition(i, AgentState::Market, out);
                if let Err(reason) = self.sell(i, out) {
                    out.emit(Some(uid), EventPayload::ActionRejected { action, reason });
                }
            }
        }
    }

    /// Cheapest way to get `item` right now: a black-market listing when it
    /// is no dearer than the shop, otherwise the shop.
    fn best_offer(&self, uid: Uid, item: ItemId) -> Option<(Credits, Option<crate::domain::ListingId>)> {
        let flags = self.world.params.flags;
        let npc = flags.npc_shop_enabled.then(|| self.price(item));
        let listing = if flags.black_market_enabled {
            self.world.economy.board.cheapest(item, uid)
        } else {
            None
        };
        match (npc, listing) {
            (Some(p), Some(l)) if l.ask_price <= p => Some((l.ask_price, Some(l.listing_id))),
            (Some(p), _) => Some((p, None)),
            (None, Some(l)) => Some((l.ask_price, Some(l.listing_id))),
            (None, None) => None,
        }
    }

    fn buy(&mut self, i: usize, out: &mut Emitter) -> Result<(), String> {
        let uid = self.world.agents[i].uid();
        let spend = self.world.agents[i].profile.spend_propensity;
        let balance = self.world.economy.balance(uid);
        let mut rng = self.rng(uid, Purpose::Economy);
        let best = self.best_gear(uid).map(|g| self.price(g.item));
        let category = if best.is_none() {
            Category::Gear
        } else {
            let r: f64 = rng.random();
            if r < 0.5 {
                Category::Consumable
            } else if r < 0.8 {
                Category::Loot
            } else {
                Category::Gear
            }
        };
        let mut options: Vec<(Credits, ItemId, Option<crate::domain::ListingId>)> = self
            .catalog
            .of_category(category)
            .filter(|it| category != Category::Gear || best.is_none_or(|b| self.price(it.item_id) > b))
            .filter_map(|it| {
                let (price, listing) = self.best_offer(uid, it.item_id)?;
                (price <= balance).then_some((price, it.item_id, listing))
            })
            .collect();
        options.sort();
        let choice = match category {
            // Big spenders buy the best gear they can afford.
            Category::Gear if spend > 0.5 => options.last().copied(),
            Category::Gear => options.first().copied(),
            _ => options.choose(&mut rng).copied(),
        };
        let Some((_, item, listing)) = choice else {
            return Err(format!("nothing affordable in {category:?}").to_lowercase());
        };
        let econ = &mut self.world.economy;
        let payload = match listing {
            Some(id) => econ.market_buy(out.time, uid, id, self.world.params.tax_rate),
            None => econ.npc_buy(out.time, uid, item, &self.catalog, &self.world.params),
        }
        .map_err(|e| e.to_string())?;
        out.emit(Some(uid), payload);
        Ok(())
    }

    fn sell(&mut self, i: usize, out: &mut Emitter) -> Result<(), String> {
        let uid = self.world.agents[i].uid();
        let Some(inst) = self.surplus(uid).first().copied() else {
            return Err("nothing to sell".into());
        };
        let mut rng = self.rng(uid, Purpose::Economy);
        let a = &self.world.agents[i];
        let days = self
            .world
            .black_market_opened_day
            .map_or(0, |d| out.time.day.saturating_sub(d));
        let channel = choose_sell_channel(
            &a.profile,
            self.channels(),
            days,
            a.fraud_victim,
            self.world.params.habit_decay,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let value = self.price(inst.item) as f64;
        let econ = &self.config.economy;
        match channel {
            SellChannel::BlackMarket => {
                let (lo, hi) = econ.ask_fraction;
                let ask = ((value * rng.random_range(lo..=hi)).round() as Credits).max(1);
                let listing = self
                    .world
                    .economy
                    .market_sell(out.time, uid, inst.id, ask, &self.catalog, self.world.params.flags)
                    .map_err(|e| e.to_string())?;
                out.emit(
                    Some(uid),
                    EventPayload::ListingCreated {
                        listing_id: listing.listing_id,
                        item: listing.item,
                        ask_price: listing.ask_price,
                    },
                );
            }
            SellChannel::Informal => {
                let (lo, hi) = econ.informal_fraction;
                let price = ((value * rng.random_range(lo..=hi)).round() as Credits).max(1);
                let partners: Vec<Uid> = self
                    .world
                    .agents
                    .iter()
                    .filter(|b| b.uid() != uid && b.state != AgentState::Offline)
                    .filter(|b| self.world.economy.balance(b.uid()) >= price)
                    .map(|b| b.uid())
                    .collect();
                let Some(&partner) = partners.choose(&mut rng) else {
                    return Err("no trading partner online".into());
                };
                let payload = self
                    .world
                    .economy
                    .informal_trade(out.time, uid, partner, inst.id, price, &self.world.params, &mut rng)
                    .map_err(|e: EconomyError| e.to_string())?;
                let fraud = matches!(payload, EventPayload::InformalTradeExecuted { fraud: true, .. });
                out.emit(Some(uid), payload);
                if fraud {
                    self.world.agents[i].fraud_victim = true;
                    self.warn_groups(uid, partner);
                }
            }
        }
        Ok(())
    }

    /// A defrauded player warns every group they belong to.
    fn warn_groups(&mut self, victim: Uid, cheat: Uid) {
        let groups: Vec<String> = self
            .world
            .bus
            .groups()
            .iter()
            .filter(|(_, m)| m.contains(&victim))
            .map(|(g, _)| g.clone())
            .collect();
        for g in groups {
            let _ = self.world.bus.publish(
                Topic::Group(g),
                Sender::Agent(victim),
                format!("warning: player {cheat} did not pay for an item"),
                self.world.now,
            );
        }
    }

    fn record_history(&mut self, events: &[Event]) {
        let cap = self.config.history_len;
        for e in events {
            let mut touch = |uid: Uid| {
                if let Some(a) = self.world.agents.get_mut(uid.0 as usize) {
                    a.history.push_back(e.clone());
                    while a.history.len() > cap {
                        a.history.pop_front();
                    }
                }
            };
            if let Some(u) = e.uid {
                touch(u);
            }
            match &e.payload {
                EventPayload::TradeExecuted { seller, .. } => touch(*seller),
                EventPayload::InformalTradeExecuted { u2, .. } => touch(*u2),
                _ => {}
            }
        }
    }

    /// Sleeps as needed so that step `t` does not run before its wall-clock
    /// slot. A no-op when time acceleration is 0.
    pub fn pace(&self, started: Instant, steps_done: u64) {
        if self.config.time_acceleration > 0.0 {
            let due = Duration::from_secs_f64(self.config.time_acceleration * steps_done as f64);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }

    /// Uid → current state for every agent.
    pub fn states(&self) -> BTreeMap<Uid, AgentState> {
        self.world.agents.iter().map(|a| (a.uid(), a.state)).collect()
    }

    pub fn into_world(self) -> WorldState {
        self.world
    }
}

fn push_action(a: &mut AgentRuntime, action: Action) {
    a.recent_actions.push_back(action);
    while a.recent_actions.len() > CONTEXT_ACTIONS {
        a.recent_actions.pop_front();
    }
}

fn build_policies(
    config: &RunConfig,
    world: &WorldState,
    heuristic: &Arc<HeuristicPolicy>,
    pool: &Arc<OutboundPool>,
) -> Result<Vec<Arc<dyn Policy>>, PolicyError> {
    let mut cache: Vec<(PolicyKind, Arc<dyn Policy>)> = Vec::new();
    let mut out = Vec::with_capacity(world.agents.len());
    for a in &world.agents {
        let kind = config.policy_binding.kind_for(&a.profile);
        if let Some((_, p)) = cache.iter().find(|(k, _)| k == kind) {
            out.push(p.clone());
            continue;
        }
        let p: Arc<dyn Policy> = match kind {
            PolicyKind::Heuristic => heuristic.clone(),
            PolicyKind::Constant { action } => Arc::new(ConstantPolicy(*action)),
            PolicyKind::Replay { corpus } => Arc::new(ReplayPolicy::from_corpus(corpus)?),
            PolicyKind::Remote { endpoint, deadline_ms } => Arc::new(RemotePolicy::new(
                endpoint,
                Duration::from_millis(*deadline_ms),
                pool.clone(),
                heuristic.clone(),
            )?),
        };
        cache.push((kind.clone(), p.clone()));
        out.push(p);
    }
    Ok(out)
}

/// Like [`HeuristicWeights::default`], re-exported for config authors.
pub fn default_heuristic_weights() -> HeuristicWeights {
    HeuristicWeights::default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{is_legal_transition, PlayerProfile, ProfileClass};

    pub(crate) fn small_config(n: u32, days: u32) -> RunConfig {
        let mut c = RunConfig::builtin("default").unwrap();
        c.population = PopulationConfig::Generated {
            size: n,
            seed: None,
            clusters: None,
            overrides: Default::default(),
        };
        c.total_days = days;
        c
    }

    fn lone_profile(activeness: f64) -> PlayerProfile {
        PlayerProfile {
            uid: Uid(0),
            class: ProfileClass::Casual,
            skill: 0.5,
            frustration_tolerance: 0.5,
            spend_propensity: 0.5,
            activeness,
            session_length_mean: 4,
            habit_informal_trade: 0.2,
        }
    }

    #[test]
    fn always_offline_agent() {
        for activeness in [0.0, 1.0] {
            let mut c = small_config(1, 1);
            c.population = PopulationConfig::Explicit {
                profiles: vec![lone_profile(activeness)],
            };
            c.policy_binding.default = PolicyKind::Constant { action: Action::Offline };
            let mut sim = Simulation::new(c).unwrap();
            let events = sim.advance(24).unwrap();
            let rolls = events
                .iter()
                .filter(|e| {
                    matches!(
                        e.payload,
                        EventPayload::SessionStart
                            | EventPayload::ActionChosen {
                                state: AgentState::Offline,
                                ..
                            }
                    )
                })
                .count();
            assert_eq!(rolls, 1);
            assert!(!events.iter().any(|e| matches!(e.payload, EventPayload::BattleResolved { .. })));
            assert_eq!(sim.world().agents[0].state, AgentState::Offline);
        }
    }

    #[test]
    fn battle_completes_before_next_decision() {
        let mut c = small_config(1, 1);
        c.population = PopulationConfig::Explicit {
            profiles: vec![lone_profile(1.0)],
        };
        c.policy_binding.default = PolicyKind::Constant { action: Action::Battle };
        let mut sim = Simulation::new(c).unwrap();
        let _ = sim.advance(1).unwrap();
        assert_eq!(sim.world().agents[0].state, AgentState::Battle);
        let events = sim.advance(1).unwrap();
        let kinds: Vec<&str> = events.iter().map(|e| e.payload.kind_name()).collect();
        let resolved = kinds.iter().position(|k| *k == "battle_resolved").unwrap();
        let back = kinds.iter().position(|k| *k == "state_transition").unwrap();
        let chosen = kinds.iter().position(|k| *k == "action_chosen").unwrap();
        assert!(resolved < back && back < chosen, "{kinds:?}");
    }

    #[test]
    fn conservation_and_legality_every_step() {
        let mut sim = Simulation::new(small_config(60, 2)).unwrap();
        let initial = sim.world().money_supply().total();
        let mut states = sim.states();
        while !sim.is_finished() {
            for e in sim.step().unwrap() {
                if let EventPayload::StateTransition { from, to } = e.payload {
                    assert!(is_legal_transition(from, to));
                    let u = e.uid.unwrap();
                    assert_eq!(states[&u], from);
                    states.insert(u, to);
                }
            }
            assert_eq!(sim.world().money_supply().total(), initial);
            assert!(sim.world().economy.items_accounted());
            assert_eq!(states, sim.states());
            for a in &sim.world().agents {
                assert_eq!(a.state == AgentState::Battle, a.pending_task.is_some());
            }
        }
    }

    #[test]
    fn chunked_advance_matches_single_advance() {
        let mut a = Simulation::new(small_config(100, 1)).unwrap();
        let mut b = Simulation::new(small_config(100, 1)).unwrap();
        let whole = a.advance(24).unwrap();
        let mut parts = b.advance(5).unwrap();
        parts.extend(b.advance(19).unwrap());
        assert_eq!(whole, parts);
        assert_eq!(a.world(), b.world());
    }

    #[test]
    fn workers_do_not_change_the_log() {
        let mut one = Simulation::new(small_config(120, 1)).unwrap();
        let mut cfg = small_config(120, 1);
        cfg.workers = 4;
        let mut four = Simulation::new(cfg).unwrap();
        assert_eq!(one.advance(24).unwrap(), four.advance(24).unwrap());
    }

    #[test]
    fn snapshot_world_resumes_identically() {
        let mut a = Simulation::new(small_config(50, 2)).unwrap();
        a.advance(30).unwrap();
        let text = serde_json::to_string(a.world()).unwrap();
        let world: WorldState = serde_json::from_str(&text).unwrap();
        let mut b = Simulation::from_world(a.config().clone(), world).unwrap();
        assert_eq!(a.advance(18).unwrap(), b.advance(18).unwrap());
    }

    #[test]
    fn finished_run_refuses_to_advance() {
        let mut sim = Simulation::new(small_config(3, 1)).unwrap();
        assert!(!sim.advance(100).unwrap().is_empty());
        assert!(sim.is_finished());
        assert!(matches!(sim.advance(1), Err(EngineError::Finished(24))));
    }

    #[test]
    fn live_intervention_lands_on_next_step() {
        let mut sim = Simulation::new(small_config(10, 1)).unwrap();
        sim.advance(3).unwrap();
        let id = sim
            .schedule(InterventionRequest {
                at_step: None,
                kind: InterventionKind::EnableFeature {
                    name: "black_market_enabled".into(),
                },
                announce: true,
            })
            .unwrap();
        let events = sim.advance(1).unwrap();
        assert!(events.iter().any(|e| matches!(
            e.payload,
            EventPayload::InterventionApplied { intervention_id, .. } if intervention_id == id
        )));
        assert!(sim.world().params.flags.black_market_enabled);
        let next = sim.advance(1).unwrap();
        let delivered = next
            .iter()
            .filter(|e| matches!(&e.payload, EventPayload::MessageDelivered { topic: Topic::Broadcast, .. }))
            .count();
        assert_eq!(delivered, 10);
    }
}
