mod common;

use common::Fx;
use gridtrade::board::{BidBoard, BoardError, BoardParams, OrderFilter, OrderStatus, ProofMode, Side};
use gridtrade::crypto::KeyPair;
use gridtrade::fixed::{Amount, Power, Price};
use gridtrade::transactions::OutputRef;
use gridtrade::types::{Asset, ChannelId, MeterId, Timestep};

const CH: ChannelId = ChannelId([7; 16]);

struct Market {
    fx: Fx,
    meter: KeyPair,
    board: BidBoard,
}

fn market(mode: ProofMode) -> Market {
    let mut fx = Fx::new(3);
    let meter = fx.key();
    fx.authorize(MeterId(0), &meter, 0);
    let board = BidBoard::new(BoardParams { proof_mode: mode, ..BoardParams::default() }, 11);
    Market { fx, meter, board }
}

impl Market {
    fn mint(&mut self, holder: &KeyPair, asset: Asset, now: u64) -> OutputRef {
        let mk = KeyPair::from_seed(self.meter.seed());
        self.fx.mint(MeterId(0), &mk, &[(asset, holder.address())], now)[0]
    }

    fn token(&mut self, holder: &KeyPair, now: u64) -> gridtrade::board::ProofToken {
        let ch = self.board.issue_challenge(holder.address(), Timestep(now));
        self.board.prove_ownership(ch.id, &holder.sign(&ch.message()), Timestep(now)).unwrap()
    }

    fn ask(&mut self, power: u64, start: u64, end: u64, price: u64) -> (KeyPair, OutputRef) {
        let seller = self.fx.key();
        let epa = self.mint(&seller, Asset::epa(Power::units(power), start, end), 1);
        let tok = self.token(&seller, 1);
        self.board.post_ask(tok, epa, Price(price), CH, &self.fx.ledger, Timestep(1)).unwrap();
        (seller, epa)
    }
}

#[test]
fn challenges_carry_distinct_nonces() {
    let mut m = market(ProofMode::Signature);
    let k = m.fx.key();
    let a = m.board.issue_challenge(k.address(), Timestep(0));
    let b = m.board.issue_challenge(k.address(), Timestep(0));
    assert_ne!(a.nonce, b.nonce);
    assert_ne!(a.id, b.id);
}

#[test]
fn late_proof_is_expired() {
    let mut m = market(ProofMode::Signature);
    let k = m.fx.key();
    let ch = m.board.issue_challenge(k.address(), Timestep(0));
    let late = ch.expires.plus(1);
    assert_eq!(m.board.prove_ownership(ch.id, &k.sign(&ch.message()), late), Err(BoardError::ChallengeExpired));
}

#[test]
fn proof_at_expiry_tick_is_accepted() {
    let mut m = market(ProofMode::Signature);
    let k = m.fx.key();
    let ch = m.board.issue_challenge(k.address(), Timestep(0));
    assert!(m.board.prove_ownership(ch.id, &k.sign(&ch.message()), ch.expires).is_ok());
}

#[test]
fn proof_is_bound_to_its_challenge() {
    let mut m = market(ProofMode::Signature);
    let k = m.fx.key();
    let a = m.board.issue_challenge(k.address(), Timestep(0));
    let b = m.board.issue_challenge(k.address(), Timestep(0));
    let sig_a = k.sign(&a.message());
    assert_eq!(m.board.prove_ownership(b.id, &sig_a, Timestep(0)), Err(BoardError::BadSignature));
    assert!(m.board.prove_ownership(a.id, &sig_a, Timestep(0)).is_ok());
}

#[test]
fn wrong_key_is_rejected() {
    let mut m = market(ProofMode::Signature);
    let (owner, thief) = (m.fx.key(), m.fx.key());
    let ch = m.board.issue_challenge(owner.address(), Timestep(0));
    assert_eq!(m.board.prove_ownership(ch.id, &thief.sign(&ch.message()), Timestep(0)), Err(BoardError::BadSignature));
}

#[test]
fn answered_challenge_cannot_be_replayed() {
    let mut m = market(ProofMode::Signature);
    let k = m.fx.key();
    let ch = m.board.issue_challenge(k.address(), Timestep(0));
    let sig = k.sign(&ch.message());
    m.board.prove_ownership(ch.id, &sig, Timestep(0)).unwrap();
    assert_eq!(m.board.prove_ownership(ch.id, &sig, Timestep(1)), Err(BoardError::ChallengeReused));
}

#[test]
fn ask_is_listed_with_its_energy() {
    let mut m = market(ProofMode::Signature);
    let (_, epa) = m.ask(5, 10, 12, 300);
    let open = m.board.query(&OrderFilter::default());
    assert_eq!(open.len(), 1);
    assert_eq!(open[0].side, Side::Ask);
    assert_eq!(open[0].assets, vec![epa]);
    assert_eq!(open[0].energy.power, Power::units(5));
}

#[test]
fn token_for_another_address_is_unauthorized() {
    let mut m = market(ProofMode::Signature);
    let (seller, other) = (m.fx.key(), m.fx.key());
    let epa = m.mint(&seller, Asset::epa(Power::units(1), 5, 5), 1);
    let tok = m.token(&other, 1);
    let err = m.board.post_ask(tok, epa, Price(1), CH, &m.fx.ledger, Timestep(1)).unwrap_err();
    assert_eq!(err, BoardError::UnauthorizedToken);
}

#[test]
fn spent_asset_cannot_be_posted() {
    let mut m = market(ProofMode::Signature);
    let seller = m.fx.key();
    let epa = m.mint(&seller, Asset::epa(Power::units(2), 5, 5), 1);
    let elsewhere = m.fx.key();
    let tx = m.fx.eft(&[(epa, &seller)], &[(Asset::epa(Power::units(2), 5, 5), elsewhere.address())]);
    m.fx.append(tx, 2).unwrap();
    let tok = m.token(&seller, 2);
    let err = m.board.post_ask(tok, epa, Price(1), CH, &m.fx.ledger, Timestep(2)).unwrap_err();
    assert_eq!(err.code(), "SPENT_ASSET");
}

#[test]
fn same_asset_twice_is_a_duplicate() {
    let mut m = market(ProofMode::Signature);
    let (seller, epa) = m.ask(2, 5, 5, 10);
    let tok = m.token(&seller, 1);
    let err = m.board.post_ask(tok, epa, Price(20), CH, &m.fx.ledger, Timestep(1)).unwrap_err();
    assert_eq!(err, BoardError::DuplicateOrder);
}

#[test]
fn wrong_kind_is_rejected() {
    let mut m = market(ProofMode::Signature);
    let seller = m.fx.key();
    let eca = m.mint(&seller, Asset::eca(Power::units(2), 5, 5), 1);
    let tok = m.token(&seller, 1);
    let err = m.board.post_ask(tok, eca, Price(1), CH, &m.fx.ledger, Timestep(1)).unwrap_err();
    assert_eq!(err, BoardError::WrongAssetKind);
}

#[test]
fn bid_uses_one_token_per_address() {
    let mut m = market(ProofMode::Signature);
    let (a, b) = (m.fx.key(), m.fx.key());
    let eca = m.mint(&a, Asset::eca(Power::units(3), 6, 7), 1);
    let fa = m.mint(&b, Asset::fa(Amount(500)), 1);
    let ta = m.token(&a, 1);
    let err = m.board.post_bid(&[ta], eca, fa, Price(1), CH, &m.fx.ledger, Timestep(1)).unwrap_err();
    assert_eq!(err, BoardError::UnauthorizedToken);
    let tb = m.token(&b, 1);
    let id = m.board.post_bid(&[ta, tb], eca, fa, Price(1), CH, &m.fx.ledger, Timestep(1)).unwrap();
    assert_eq!(m.board.order(id).unwrap().budget, Some(Amount(500)));
}

#[test]
fn empty_board_query_is_empty() {
    let m = market(ProofMode::Signature);
    assert!(m.board.query(&OrderFilter::default()).is_empty());
}

#[test]
fn overlap_filter_is_inclusive() {
    let mut m = market(ProofMode::Signature);
    m.ask(1, 10, 12, 5);
    let q = |s, e| OrderFilter { overlap: Some((Timestep(s), Timestep(e))), ..OrderFilter::default() };
    assert_eq!(m.board.query(&q(12, 20)).len(), 1);
    assert_eq!(m.board.query(&q(0, 10)).len(), 1);
    assert!(m.board.query(&q(13, 20)).is_empty());
    assert!(m.board.query(&q(0, 9)).is_empty());
}

#[test]
fn query_sorts_by_price_and_filters_bounds() {
    let mut m = market(ProofMode::Signature);
    m.ask(1, 5, 5, 30);
    m.ask(1, 5, 5, 10);
    m.ask(1, 5, 5, 20);
    let prices: Vec<u64> = m.board.query(&OrderFilter::default()).iter().map(|o| o.price.0).collect();
    assert_eq!(prices, vec![10, 20, 30]);
    let f = OrderFilter { min_price: Some(Price(15)), max_price: Some(Price(20)), ..OrderFilter::default() };
    assert_eq!(m.board.query(&f).len(), 1);
    let bids = OrderFilter { side: Some(Side::Bid), ..OrderFilter::default() };
    assert!(m.board.query(&bids).is_empty());
}

#[test]
fn spent_ask_goes_stale_and_leaves_the_board() {
    let mut m = market(ProofMode::Signature);
    let (seller, epa) = m.ask(2, 5, 5, 10);
    let other = m.fx.key();
    let tx = m.fx.eft(&[(epa, &seller)], &[(Asset::epa(Power::units(2), 5, 5), other.address())]);
    m.fx.append(tx, 2).unwrap();
    assert!(!m.board.consistent_with(&m.fx.ledger));
    m.board.sync(&m.fx.ledger);
    assert!(m.board.consistent_with(&m.fx.ledger));
    assert!(m.board.query(&OrderFilter::default()).is_empty());
    assert_eq!(m.board.orders().next().unwrap().status, OrderStatus::Stale);
}

#[test]
fn settled_swap_consumes_both_orders() {
    let mut m = market(ProofMode::Signature);
    let (seller, epa) = m.ask(2, 5, 5, 10);
    let buyer = m.fx.key();
    let eca = m.mint(&buyer, Asset::eca(Power::units(2), 5, 5), 1);
    let fa = m.mint(&buyer, Asset::fa(Amount(20)), 1);
    let tb = m.token(&buyer, 1);
    m.board.post_bid(&[tb], eca, fa, Price(10), CH, &m.fx.ledger, Timestep(1)).unwrap();
    let tx = m.fx.eft(
        &[(epa, &seller), (eca, &buyer), (fa, &buyer)],
        &[
            (Asset::epa(Power::units(2), 5, 5), buyer.address()),
            (Asset::eca(Power::units(2), 5, 5), seller.address()),
            (Asset::fa(Amount(20)), seller.address()),
        ],
    );
    m.fx.append(tx, 2).unwrap();
    m.board.sync(&m.fx.ledger);
    assert!(m.board.orders().all(|o| o.status == OrderStatus::Consumed));
}

#[test]
fn withdraw_needs_the_holder_token() {
    let mut m = market(ProofMode::Signature);
    let (seller, _) = m.ask(1, 5, 5, 10);
    let id = m.board.query(&OrderFilter::default())[0].id;
    let stranger = m.fx.key();
    let ts = m.token(&stranger, 1);
    assert_eq!(m.board.withdraw(id, ts, &m.fx.ledger), Err(BoardError::UnauthorizedToken));
    let tok = m.token(&seller, 1);
    m.board.withdraw(id, tok, &m.fx.ledger).unwrap();
    assert_eq!(m.board.order(id).unwrap().status, OrderStatus::Withdrawn);
    assert_eq!(m.board.withdraw(id, tok, &m.fx.ledger), Err(BoardError::UnknownOrder));
}

#[test]
fn zero_transfer_proves_ownership() {
    let mut m = market(ProofMode::ZeroTransfer);
    let seller = m.fx.key();
    let fa = m.mint(&seller, Asset::fa(Amount(10)), 1);
    let epa = m.mint(&seller, Asset::epa(Power::units(1), 9, 9), 1);
    let ch = m.board.issue_challenge(seller.address(), Timestep(1));
    assert_eq!(m.board.prove_ownership(ch.id, &seller.sign(&ch.message()), Timestep(1)), Err(BoardError::WrongProofMode));
    let tx = m.fx.eft(&[(fa, &seller)], &[(Asset::fa(Amount(0)), ch.sink()), (Asset::fa(Amount(10)), seller.address())]);
    let id = gridtrade::transactions::Transaction::Eft(tx.clone()).id();
    m.fx.append(tx, 2).unwrap();
    let tok = m.board.prove_by_transfer(ch.id, &id, &m.fx.ledger, Timestep(3)).unwrap();
    assert!(m.board.post_ask(tok, epa, Price(1), CH, &m.fx.ledger, Timestep(3)).is_ok());
}

#[test]
fn transfer_from_another_address_proves_nothing() {
    let mut m = market(ProofMode::ZeroTransfer);
    let (seller, other) = (m.fx.key(), m.fx.key());
    let fa = m.mint(&other, Asset::fa(Amount(10)), 1);
    let ch = m.board.issue_challenge(seller.address(), Timestep(1));
    let tx = m.fx.eft(&[(fa, &other)], &[(Asset::fa(Amount(0)), ch.sink()), (Asset::fa(Amount(10)), other.address())]);
    let id = gridtrade::transactions::Transaction::Eft(tx.clone()).id();
    m.fx.append(tx, 2).unwrap();
    assert_eq!(m.board.prove_by_transfer(ch.id, &id, &m.fx.ledger, Timestep(3)), Err(BoardError::BadSignature));
}
