//! The three transaction kinds, their canonical payloads and validity rules.

mod policy;
mod validate;

pub use policy::{active_prices, active_registry, apply_regulation, MeterStatus, Prices, Registry};
pub use validate::{
    validate_eft, validate_rt, validate_smt, LedgerView, OutputRecord, ValidationVerdict, Violation,
};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::crypto::{self, KeyPair, Signature};
use crate::fixed::{Amount, Power, Price};
use crate::types::{
    Address, Asset, AssetKind, EnergyAsset, FinancialAsset, MeterId, Nonce, PublicKey, Timestep,
    TxId,
};

/// Points at one output of an earlier transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutputRef {
    pub tx: TxId,
    pub kind: AssetKind,
    pub index: u32,
}

impl std::fmt::Display for OutputRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.tx.short(), self.kind, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetInput {
    pub out: OutputRef,
    pub sig: Signature,
}

impl AssetInput {
    pub fn unsigned(out: OutputRef) -> Self {
        AssetInput { out, sig: Signature::zeroed() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnergyOutput {
    pub asset: EnergyAsset,
    pub address: Address,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FinancialOutput {
    pub asset: FinancialAsset,
    pub address: Address,
}

/// Output lists shared by energy/financial and smart-meter transactions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub epa: Vec<EnergyOutput>,
    pub eca: Vec<EnergyOutput>,
    pub fa: Vec<FinancialOutput>,
}

impl Outputs {
    pub fn is_empty(&self) -> bool {
        self.epa.is_empty() && self.eca.is_empty() && self.fa.is_empty()
    }

    /// Appends `asset` to the list of its kind and returns its `(kind, index)`.
    pub fn push(&mut self, asset: Asset, address: Address) -> (AssetKind, u32) {
        match asset {
            Asset::Epa(a) => {
                self.epa.push(EnergyOutput { asset: a, address });
                (AssetKind::Epa, self.epa.len() as u32 - 1)
            }
            Asset::Eca(a) => {
                self.eca.push(EnergyOutput { asset: a, address });
                (AssetKind::Eca, self.eca.len() as u32 - 1)
            }
            Asset::Fa(a) => {
                self.fa.push(FinancialOutput { asset: a, address });
                (AssetKind::Fa, self.fa.len() as u32 - 1)
            }
        }
    }

    /// Every output with its kind and index, EPA first, then ECA, then FA.
    pub fn iter(&self) -> impl Iterator<Item = (AssetKind, u32, Asset, Address)> + '_ {
        let epa = self
            .epa
            .iter()
            .enumerate()
            .map(|(i, o)| (AssetKind::Epa, i as u32, Asset::Epa(o.asset), o.address));
        let eca = self
            .eca
            .iter()
            .enumerate()
            .map(|(i, o)| (AssetKind::Eca, i as u32, Asset::Eca(o.asset), o.address));
        let fa = self
            .fa
            .iter()
            .enumerate()
            .map(|(i, o)| (AssetKind::Fa, i as u32, Asset::Fa(o.asset), o.address));
        epa.chain(eca).chain(fa)
    }

    pub fn total_fa(&self) -> Amount {
        Amount(self.fa.iter().map(|o| o.asset.amount.0).sum())
    }
}

/// Transfers assets between addresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyFinancialTx {
    pub epa_in: Vec<AssetInput>,
    pub eca_in: Vec<AssetInput>,
    pub fa_in: Vec<AssetInput>,
    pub outputs: Outputs,
    pub nonce: Nonce,
}

impl EnergyFinancialTx {
    pub fn new(nonce: Nonce) -> Self {
        EnergyFinancialTx {
            epa_in: Vec::new(),
            eca_in: Vec::new(),
            fa_in: Vec::new(),
            outputs: Outputs::default(),
            nonce,
        }
    }

    pub fn add_input(&mut self, out: OutputRef) {
        let list = match out.kind {
            AssetKind::Epa => &mut self.epa_in,
            AssetKind::Eca => &mut self.eca_in,
            AssetKind::Fa => &mut self.fa_in,
        };
        list.push(AssetInput::unsigned(out));
    }

    pub fn inputs(&self) -> impl Iterator<Item = &AssetInput> {
        self.epa_in.iter().chain(&self.eca_in).chain(&self.fa_in)
    }

    fn inputs_mut(&mut self) -> impl Iterator<Item = &mut AssetInput> {
        self.epa_in.iter_mut().chain(self.eca_in.iter_mut()).chain(self.fa_in.iter_mut())
    }

    pub fn input_count(&self) -> usize {
        self.epa_in.len() + self.eca_in.len() + self.fa_in.len()
    }

    /// Signs every input referencing `out` with `key`. Signatures cover the
    /// whole transaction body, so all inputs and outputs must be final.
    pub fn sign_input(&mut self, out: &OutputRef, key: &KeyPair) -> bool {
        let payload = Transaction::Eft(self.clone()).signing_payload();
        let sig = key.sign(&payload);
        let mut found = false;
        for input in self.inputs_mut().filter(|i| i.out == *out) {
            input.sig = sig.clone();
            found = true;
        }
        found
    }

    /// Signs each input with the key returned by `key_for`.
    pub fn sign_with<'k>(&mut self, mut key_for: impl FnMut(&OutputRef) -> Option<&'k KeyPair>) {
        let payload = Transaction::Eft(self.clone()).signing_payload();
        for input in self.inputs_mut() {
            if let Some(k) = key_for(&input.out) {
                input.sig = k.sign(&payload);
            }
        }
    }
}

/// Mints assets from a smart meter to its prosumer's addresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmartMeterTx {
    pub outputs: Outputs,
    pub id: MeterId,
    pub nonce: Nonce,
    pub sig: Signature,
}

impl SmartMeterTx {
    pub fn signed(outputs: Outputs, id: MeterId, nonce: Nonce, meter_key: &KeyPair) -> Self {
        let mut tx = SmartMeterTx { outputs, id, nonce, sig: Signature::zeroed() };
        tx.sig = meter_key.sign(&Transaction::Smt(tx.clone()).signing_payload());
        tx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeterAuthorization {
    pub id: MeterId,
    pub pubkey: PublicKey,
}

/// DSO-signed update of the meter registry and price policy, effective for
/// timesteps strictly after `time`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegulatoryTx {
    pub authorize: Vec<MeterAuthorization>,
    pub ban: Vec<MeterId>,
    pub price_consumption: Price,
    pub price_production: Price,
    pub time: Timestep,
    pub sig: Signature,
}

impl RegulatoryTx {
    pub fn signed(
        authorize: Vec<MeterAuthorization>,
        ban: Vec<MeterId>,
        prices: Prices,
        time: Timestep,
        dso_key: &KeyPair,
    ) -> Self {
        let mut tx = RegulatoryTx {
            authorize,
            ban,
            price_consumption: prices.consumption,
            price_production: prices.production,
            time,
            sig: Signature::zeroed(),
        };
        tx.sig = dso_key.sign(&Transaction::Rt(tx.clone()).signing_payload());
        tx
    }

    pub fn prices(&self) -> Prices {
        Prices { consumption: self.price_consumption, production: self.price_production }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transaction {
    Eft(EnergyFinancialTx),
    Smt(SmartMeterTx),
    Rt(RegulatoryTx),
}

const TXID_DOMAIN: &[u8] = b"gridtrade/txid/v1";

impl Transaction {
    /// Canonical encoding with every signature field zeroed. Signatures are
    /// computed over these bytes, and the transaction id is their hash.
    pub fn signing_payload(&self) -> Vec<u8> {
        let mut body = self.clone();
        match &mut body {
            Transaction::Eft(tx) => tx.inputs_mut().for_each(|i| i.sig = Signature::zeroed()),
            Transaction::Smt(tx) => tx.sig = Signature::zeroed(),
            Transaction::Rt(tx) => tx.sig = Signature::zeroed(),
        }
        codec::encode(&body)
    }

    pub fn id(&self) -> TxId {
        TxId(crypto::sha256(&[TXID_DOMAIN, &self.signing_payload()]))
    }

    pub fn kind_code(&self) -> &'static str {
        match self {
            Transaction::Eft(_) => "EFT",
            Transaction::Smt(_) => "SMT",
            Transaction::Rt(_) => "RT",
        }
    }

    pub fn outputs(&self) -> Option<&Outputs> {
        match self {
            Transaction::Eft(tx) => Some(&tx.outputs),
            Transaction::Smt(tx) => Some(&tx.outputs),
            Transaction::Rt(_) => None,
        }
    }

    /// Output references created by this transaction, given its id.
    pub fn created_outputs(&self, id: TxId) -> Vec<(OutputRef, Asset, Address)> {
        match self.outputs() {
            Some(outs) => outs
                .iter()
                .map(|(kind, index, asset, addr)| (OutputRef { tx: id, kind, index }, asset, addr))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn spent_inputs(&self) -> Vec<OutputRef> {
        match self {
            Transaction::Eft(tx) => tx.inputs().map(|i| i.out).collect(),
            _ => Vec::new(),
        }
    }

    pub fn as_eft(&self) -> Option<&EnergyFinancialTx> {
        match self {
            Transaction::Eft(tx) => Some(tx),
            _ => None,
        }
    }
}

/// Ledger header fixed at genesis: the DSO key, initial prices and the
/// schemes every replica must agree on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genesis {
    pub dso_key: PublicKey,
    pub initial_prices: Prices,
    pub tick_seconds: u32,
    pub signature_scheme: String,
    pub hash_scheme: String,
    pub encoding: String,
}

impl Genesis {
    pub fn new(dso_key: PublicKey, initial_prices: Prices, tick_seconds: u32) -> Self {
        Genesis {
            dso_key,
            initial_prices,
            tick_seconds,
            signature_scheme: crypto::SIGNATURE_SCHEME.to_string(),
            hash_scheme: crypto::HASH_SCHEME.to_string(),
            encoding: codec::ENCODING_SCHEME.to_string(),
        }
    }
}

/// Convenience for building single-kind outputs in tests and agents.
pub fn energy_output(power: Power, start: u64, end: u64, address: Address) -> EnergyOutput {
    EnergyOutput {
        asset: EnergyAsset { power, start: Timestep(start), end: Timestep(end) },
        address,
    }
}

pub fn financial_output(amount: Amount, address: Address) -> FinancialOutput {
    FinancialOutput { asset: FinancialAsset { amount }, address }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_eft() -> (EnergyFinancialTx, KeyPair) {
        let k = KeyPair::from_seed([9; 32]);
        let mut tx = EnergyFinancialTx::new(Nonce([1; 16]));
        tx.add_input(OutputRef { tx: TxId([2; 32]), kind: AssetKind::Epa, index: 0 });
        tx.outputs.epa.push(energy_output(Power::units(5), 0, 3, k.address()));
        (tx, k)
    }

    #[test]
    fn id_ignores_signatures() {
        let (mut tx, k) = sample_eft();
        let before = Transaction::Eft(tx.clone()).id();
        let r = tx.epa_in[0].out;
        assert!(tx.sign_input(&r, &k));
        assert_eq!(Transaction::Eft(tx).id(), before);
    }

    #[test]
    fn id_changes_with_body() {
        let (tx, _) = sample_eft();
        let mut other = tx.clone();
        other.nonce = Nonce([2; 16]);
        assert_ne!(Transaction::Eft(tx).id(), Transaction::Eft(other).id());
    }

    #[test]
    fn binary_and_text_round_trip() {
        let (mut tx, k) = sample_eft();
        let r = tx.epa_in[0].out;
        tx.sign_input(&r, &k);
        let t = Transaction::Eft(tx);
        let back: Transaction = codec::decode(&codec::encode(&t)).unwrap();
        assert_eq!(back, t);
        let back: Transaction = codec::from_text(&codec::to_text(&t)).unwrap();
        assert_eq!(back, t);
    }
}
