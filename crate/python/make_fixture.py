"""Regenerates crates/core/tests/data/real_molecules.jsonl (needs rdkit)."""
import json
import sys

from rdkit import Chem
from rdkit.Chem import AllChem

SMILES = {
    "aspirin": "CC(=O)Oc1ccccc1C(=O)O",
    "ibuprofen": "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "caffeine": "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "paracetamol": "CC(=O)Nc1ccc(O)cc1",
    "nicotine": "CN1CCC[C@H]1c1cccnc1",
    "lidocaine": "CCN(CC)CC(=O)Nc1c(C)cccc1C",
    "menthol": "CC(C)[C@@H]1CC[C@@H](C)C[C@H]1O",
    "serotonin": "NCCc1c[nH]c2ccc(O)cc12",
    "glycylglycine": "NCC(=O)NCC(=O)O",
    "butanol": "CCCCO",
    "cyclohexylamine": "NC1CCCCC1",
    "phenylalanine": "N[C@@H](Cc1ccccc1)C(=O)O",
}


def main(out):
    with open(out, "w") as f:
        for name, smi in SMILES.items():
            m = Chem.AddHs(Chem.MolFromSmiles(smi))
            ids = AllChem.EmbedMultipleConfs(m, numConfs=3, randomSeed=7)
            AllChem.MMFFOptimizeMoleculeConfs(m)
            bonds = [[b.GetBeginAtomIdx(), b.GetEndAtomIdx(), b.GetBondTypeAsDouble()] for b in m.GetBonds()]
            confs = [
                [[round(v, 6) for v in m.GetConformer(i).GetAtomPosition(a)] for a in range(m.GetNumAtoms())]
                for i in ids
            ]
            rec = {
                "name": name,
                "elements": [a.GetAtomicNum() for a in m.GetAtoms()],
                "bonds": bonds,
                "conformers": confs,
                "charges": [a.GetFormalCharge() for a in m.GetAtoms()],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data/real_molecules.jsonl")
