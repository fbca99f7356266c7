//! Direct, group and broadcast messages with next-step delivery.
//!
//! cargo run --example message_bus

use anyhow::Result;
use mmo_sim::domain::Uid;
use mmo_sim::messaging::{MessageBus, Sender, Topic};

fn main() -> Result<()> {
    let mut bus = MessageBus::new((0..5).map(Uid));
    bus.set_group("squad", [Uid(1), Uid(2)])?;
    bus.publish(Topic::P2p(Uid(3)), Sender::Agent(Uid(0)), "selling a helmet", 10)?;
    bus.publish(Topic::Group("squad".into()), Sender::Agent(Uid(1)), "regroup at extraction", 10)?;
    bus.publish(Topic::Broadcast, Sender::System, "server restart at 12:00", 10)?;

    // Nothing is visible in the step it was sent.
    assert!(bus.drain(Uid(2), 10).is_empty());
    for uid in (0..5).map(Uid) {
        let inbox = bus.drain(uid, 11);
        let bodies: Vec<&str> = inbox.iter().map(|m| m.body.as_str()).collect();
        println!("player {uid}: {bodies:?}");
    }
    assert!(bus.publish(Topic::Group("nobody".into()), Sender::System, "?", 11).is_err());
    Ok(())
}
