#!/usr/bin/env python3
"""Build the bundled desk corpora (en, fr, de, py) as gzipped JSON Lines.

Natural-language documents are short encyclopedic entries produced from
per-language grammars; Python documents are real functions extracted from the
CPython standard library (docstrings stripped, normalized with ``ast.unparse``).
Output is deterministic for a given seed and interpreter version.

    python scripts/build_desk_corpus.py --out src/modmoe/data --docs 8000
"""
from __future__ import annotations

import argparse
import ast
import gzip
import json
import random
import sys
import sysconfig
from pathlib import Path

# ---------------------------------------------------------------------------
# shared helpers


def fmt_int(n: int, sep: str) -> str:
    s = f"{n:,}"
    return s.replace(",", sep)


def pick(rng: random.Random, items):
    return items[rng.randrange(len(items))]


def place_name(rng: random.Random, parts: dict) -> str:
    pre = pick(rng, parts["pre"])
    mid = pick(rng, parts["mid"]) if rng.random() < 0.35 else ""
    suf = pick(rng, parts["suf"])
    return (pre + mid + suf).capitalize()


# ---------------------------------------------------------------------------
# English

EN = {
    "place": {
        "pre": ["ash", "bright", "cold", "deep", "elm", "fair", "green", "hart", "kings", "lang",
                "mill", "north", "oak", "red", "stan", "thorn", "wake", "west", "brad", "chester"],
        "mid": ["er", "ing", "en", "wick"],
        "suf": ["ton", "field", "bury", "ford", "ham", "ley", "worth", "wood", "bridge", "port", "by", "mouth"],
    },
    "first_m": ["John", "William", "Thomas", "George", "Henry", "Arthur", "Edward", "Samuel", "Robert",
                "James", "Charles", "Walter", "Frederick", "Albert", "Richard", "Peter", "David", "Hugh"],
    "first_f": ["Mary", "Elizabeth", "Margaret", "Alice", "Catherine", "Eleanor", "Dorothy", "Ruth",
                "Helen", "Emily", "Jane", "Agnes", "Florence", "Grace", "Anne", "Harriet", "Edith"],
    "last": ["Smith", "Turner", "Baker", "Harris", "Walker", "Cooper", "Hughes", "Fletcher", "Morgan",
             "Wright", "Carter", "Ellis", "Palmer", "Hayward", "Stevens", "Brooks", "Bennett", "Lawson"],
    "countries": ["England", "Scotland", "Wales", "Ireland", "Canada", "Australia", "New Zealand",
                  "the United States", "South Africa", "India"],
    "professions": [("physicist", "physicist"), ("painter", "painter"), ("novelist", "novelist"),
                    ("composer", "composer"), ("architect", "architect"), ("engineer", "engineer"),
                    ("botanist", "botanist"), ("politician", "politician"), ("poet", "poet"),
                    ("mathematician", "mathematician"), ("actor", "actress"), ("historian", "historian"),
                    ("photographer", "photographer"), ("surgeon", "surgeon")],
    "works": ["a study of light and colour", "several novels about rural life", "a symphony in four movements",
              "the design of the town hall", "a treatise on number theory", "a collection of short poems",
              "a history of the local railway", "a method for measuring soil moisture",
              "a series of portraits", "an essay on public education", "a new kind of suspension bridge",
              "a catalogue of alpine flowers"],
    "features": ["its medieval cathedral", "a large covered market", "the old stone bridge",
                 "its annual music festival", "a busy harbour", "the university library",
                 "wide public gardens", "a textile museum", "the ruins of a Norman castle",
                 "its Victorian railway station"],
    "industries": ["fishing", "wool trade", "shipbuilding", "brewing", "coal mining", "farming",
                   "tourism", "printing", "glass making", "software development"],
    "animals": [("red fox", "forests and farmland", "small mammals and berries"),
                ("barn owl", "open fields and old barns", "mice and voles"),
                ("common frog", "ponds and damp meadows", "insects and worms"),
                ("grey heron", "rivers and lakes", "fish and frogs"),
                ("badger", "woodland edges", "earthworms and roots"),
                ("otter", "clean rivers", "fish and crayfish"),
                ("hedgehog", "gardens and hedgerows", "beetles and slugs"),
                ("red squirrel", "pine forests", "seeds and nuts"),
                ("brown trout", "cold streams", "insect larvae"),
                ("skylark", "grassland", "seeds and insects")],
    "adj_size": ["small", "medium-sized", "large", "slender", "sturdy"],
    "clubs": ["United", "Rovers", "Athletic", "Wanderers", "City", "Town", "Albion", "Rangers"],
    "sports": ["football", "rugby", "cricket", "hockey"],
    "events": ["a great flood", "a fire in the old quarter", "a long strike at the docks",
               "the opening of the first railway line", "a royal visit", "a severe winter",
               "the founding of the town council", "an outbreak of cholera"],
}


def en_doc(rng: random.Random) -> str:
    L = EN
    topic = rng.randrange(5)
    sents: list[str] = []
    if topic == 0:
        city = place_name(rng, L["place"])
        river = place_name(rng, L["place"])
        pop = rng.randrange(800, 900_000)
        year = rng.randrange(900, 1900)
        country = pick(rng, L["countries"])
        opts = [
            f"{city} is a town in {country} with a population of {fmt_int(pop, ',')}.",
            f"The town lies on the River {river}, about {rng.randrange(3, 90)} miles from the coast.",
            f"It was first mentioned in a charter of {year}.",
            f"{city} is known for {pick(rng, L['features'])}.",
            f"During the nineteenth century the local economy depended on {pick(rng, L['industries'])}.",
            f"In {year + rng.randrange(50, 400)} the town suffered {pick(rng, L['events'])}.",
            f"Today most residents of {city} work in {pick(rng, L['industries'])} or in nearby {place_name(rng, L['place'])}.",
            f"The population grew by {rng.randrange(2, 40)} percent between 1950 and 2011.",
        ]
        sents = [opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4))
    elif topic == 1:
        female = rng.random() < 0.5
        first = pick(rng, L["first_f"] if female else L["first_m"])
        name = f"{first} {pick(rng, L['last'])}"
        prof = pick(rng, L["professions"])[1 if female else 0]
        born = rng.randrange(1700, 1990)
        died = born + rng.randrange(30, 95)
        city = place_name(rng, L["place"])
        pron, poss = ("she", "her") if female else ("he", "his")
        opts = [
            f"{name} ({born} to {died}) was {'an' if prof[0] in 'aeiou' else 'a'} {prof}." if died < 2024
            else f"{name} (born {born}) is {'an' if prof[0] in 'aeiou' else 'a'} {prof}.",
            f"{pron.capitalize()} was born in {city} and studied in {place_name(rng, L['place'])}.",
            f"{pron.capitalize()} is best known for {pick(rng, L['works'])}.",
            f"In {born + rng.randrange(20, 40)} {pron} moved to {pick(rng, L['countries'])}, where {pron} spent most of {poss} career.",
            f"{poss.capitalize()} early work received little attention, but later critics praised it.",
            f"{pron.capitalize()} was elected to the national academy in {born + rng.randrange(35, 60)}.",
            f"A street in {city} is named after {'her' if female else 'him'}.",
        ]
        sents = [opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4))
    elif topic == 2:
        animal, habitat, food = pick(rng, L["animals"])
        opts = [
            f"The {animal} is a {pick(rng, L['adj_size'])} animal found in {habitat}.",
            f"It feeds mainly on {food}.",
            f"Adults reach a length of about {rng.randrange(5, 120)} centimetres.",
            f"The {animal} is most active at {pick(rng, ['night', 'dawn', 'dusk', 'midday'])}.",
            f"Its numbers have {pick(rng, ['declined', 'increased', 'remained stable'])} since {rng.randrange(1950, 2015)}.",
            f"Females usually lay or give birth to {rng.randrange(2, 9)} young each year.",
            f"In some regions the {animal} is protected by law.",
        ]
        sents = [opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4))
    elif topic == 3:
        town = place_name(rng, L["place"])
        club = f"{town} {pick(rng, L['clubs'])}"
        sport = pick(rng, L["sports"])
        founded = rng.randrange(1860, 1990)
        opts = [
            f"{club} is a {sport} club based in {town}.",
            f"The club was founded in {founded} by a group of local workers.",
            f"Its home ground holds {fmt_int(rng.randrange(800, 40_000), ',')} spectators.",
            f"{club} won the regional cup in {founded + rng.randrange(5, 100)}.",
            f"The team plays in {pick(rng, ['red and white', 'blue', 'green and gold', 'black and white stripes'])}.",
            f"Their greatest rivals are {place_name(rng, L['place'])} {pick(rng, L['clubs'])}.",
        ]
        sents = [opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4))
    else:
        river = place_name(rng, L["place"])
        opts = [
            f"The River {river} is a river in {pick(rng, L['countries'])}.",
            f"It is {rng.randrange(12, 400)} kilometres long and flows into the {pick(rng, ['North Sea', 'Irish Sea', 'Atlantic Ocean', 'English Channel'])}.",
            f"Its source lies in the hills above {place_name(rng, L['place'])}.",
            f"The river was used to power mills from the {pick(rng, ['twelfth', 'fifteenth', 'seventeenth', 'eighteenth'])} century.",
            f"Several bridges cross the {river}, the oldest dating from {rng.randrange(1100, 1800)}.",
            f"The valley is popular with walkers and anglers.",
        ]
        sents = [opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4))
    return " ".join(sents)


# ---------------------------------------------------------------------------
# French

FR = {
    "place": {
        "pre": ["beau", "bel", "char", "mont", "ville", "roche", "val", "font", "mar", "lan",
                "saint-ju", "sainte-co", "bourg", "clair", "chateau", "pont", "ber", "sau"],
        "mid": ["ne", "re", "let", "on"],
        "suf": ["ville", "mont", "court", "ac", "ay", "ières", "eau", "lieu", "vaux", "ieux", "ange", "ois"],
    },
    "first_m": ["Jean", "Pierre", "Louis", "Henri", "Jacques", "François", "Michel", "André", "Paul",
                "Émile", "Marcel", "Claude", "Antoine", "Georges", "Étienne", "Lucien", "René"],
    "first_f": ["Marie", "Jeanne", "Louise", "Marguerite", "Madeleine", "Suzanne", "Hélène", "Camille",
                "Simone", "Geneviève", "Claire", "Élise", "Juliette", "Colette", "Berthe", "Denise"],
    "last": ["Martin", "Bernard", "Dubois", "Lefèvre", "Moreau", "Laurent", "Girard", "Rousseau",
             "Fontaine", "Chevalier", "Mercier", "Blanchard", "Garnier", "Faure", "Lambert", "Roux"],
    "countries": [("France", "en France"), ("Belgique", "en Belgique"), ("Suisse", "en Suisse"),
                  ("Canada", "au Canada"), ("Québec", "au Québec"), ("Luxembourg", "au Luxembourg"),
                  ("Sénégal", "au Sénégal"), ("Maroc", "au Maroc")],
    "professions": [("physicien", "physicienne"), ("peintre", "peintre"), ("romancier", "romancière"),
                    ("compositeur", "compositrice"), ("architecte", "architecte"), ("ingénieur", "ingénieure"),
                    ("botaniste", "botaniste"), ("homme politique", "femme politique"), ("poète", "poétesse"),
                    ("mathématicien", "mathématicienne"), ("acteur", "actrice"), ("historien", "historienne"),
                    ("photographe", "photographe"), ("chirurgien", "chirurgienne")],
    "works": ["une étude sur la lumière et la couleur", "plusieurs romans sur la vie rurale",
              "une symphonie en quatre mouvements", "les plans de l'hôtel de ville",
              "un traité de théorie des nombres", "un recueil de poèmes courts",
              "une histoire du chemin de fer local", "une méthode pour mesurer l'humidité du sol",
              "une série de portraits", "un essai sur l'éducation publique",
              "un nouveau type de pont suspendu", "un catalogue des fleurs alpines"],
    "features": ["sa cathédrale gothique", "un grand marché couvert", "le vieux pont de pierre",
                 "son festival de musique annuel", "un port très animé", "la bibliothèque universitaire",
                 "de vastes jardins publics", "un musée du textile", "les ruines d'un château fort",
                 "sa gare du dix-neuvième siècle"],
    "industries": ["la pêche", "le commerce de la laine", "la construction navale", "la viticulture",
                   "les mines de charbon", "l'agriculture", "le tourisme", "l'imprimerie",
                   "la verrerie", "l'informatique"],
    "animals": [("le renard roux", "les forêts et les champs", "de petits mammifères et de baies"),
                ("la chouette effraie", "les champs ouverts et les vieilles granges", "de souris et de campagnols"),
                ("la grenouille rousse", "les mares et les prairies humides", "d'insectes et de vers"),
                ("le héron cendré", "les rivières et les lacs", "de poissons et de grenouilles"),
                ("le blaireau", "les lisières des bois", "de vers de terre et de racines"),
                ("la loutre", "les rivières propres", "de poissons et d'écrevisses"),
                ("le hérisson", "les jardins et les haies", "de coléoptères et de limaces"),
                ("l'écureuil roux", "les forêts de pins", "de graines et de noisettes"),
                ("la truite fario", "les ruisseaux froids", "de larves d'insectes"),
                ("l'alouette des champs", "les prairies", "de graines et d'insectes")],
    "adj_size": ["petit", "assez grand", "grand", "élancé", "robuste"],
    "clubs": ["Olympique", "Racing Club", "Stade", "Football Club", "Union sportive", "Association sportive"],
    "sports": ["football", "rugby", "handball", "hockey"],
    "events": ["une grande inondation", "un incendie dans la vieille ville", "une longue grève au port",
               "l'ouverture de la première ligne de chemin de fer", "une visite royale", "un hiver très rigoureux",
               "la fondation du conseil municipal", "une épidémie de choléra"],
}


def fr_doc(rng: random.Random) -> str:
    L = FR
    topic = rng.randrange(5)
    if topic == 0:
        city = place_name(rng, L["place"])
        river = place_name(rng, L["place"])
        pop = rng.randrange(800, 900_000)
        year = rng.randrange(900, 1900)
        _, in_country = pick(rng, L["countries"])
        opts = [
            f"{city} est une commune située {in_country}, qui compte {fmt_int(pop, ' ')} habitants.",
            f"La ville se trouve sur les bords de la {river}, à environ {rng.randrange(3, 140)} kilomètres de la mer.",
            f"Elle est mentionnée pour la première fois dans une charte de {year}.",
            f"{city} est connue pour {pick(rng, L['features'])}.",
            f"Au dix-neuvième siècle, l'économie locale reposait sur {pick(rng, L['industries'])}.",
            f"En {year + rng.randrange(50, 400)}, la ville a connu {pick(rng, L['events'])}.",
            f"Aujourd'hui, la plupart des habitants travaillent dans {pick(rng, L['industries'])} ou à {place_name(rng, L['place'])}.",
            f"La population a augmenté de {rng.randrange(2, 40)} pour cent entre 1950 et 2011.",
        ]
    elif topic == 1:
        female = rng.random() < 0.5
        first = pick(rng, L["first_f"] if female else L["first_m"])
        name = f"{first} {pick(rng, L['last'])}"
        prof = pick(rng, L["professions"])[1 if female else 0]
        born = rng.randrange(1700, 1990)
        died = born + rng.randrange(30, 95)
        city = place_name(rng, L["place"])
        e = "e" if female else ""
        pron = "elle" if female else "il"
        nat = pick(rng, [("français", "française"), ("belge", "belge"), ("suisse", "suisse"),
                         ("canadien", "canadienne")])[1 if female else 0]
        opts = [
            f"{name}, né{e} en {born} et mort{e} en {died}, est un{e} {prof} {nat}." if died < 2024
            else f"{name}, né{e} en {born}, est un{e} {prof} {nat}.",
            f"{pron.capitalize()} est né{e} à {city} et a fait ses études à {place_name(rng, L['place'])}.",
            f"{pron.capitalize()} est surtout connu{e} pour {pick(rng, L['works'])}.",
            f"En {born + rng.randrange(20, 40)}, {pron} s'installe {pick(rng, L['countries'])[1]}, où {pron} passe la plus grande partie de sa carrière.",
            f"Ses premières œuvres passent inaperçues, mais la critique les salue plus tard.",
            f"{pron.capitalize()} est élu{e} à l'Académie en {born + rng.randrange(35, 60)}.",
            f"Une rue de {city} porte aujourd'hui son nom.",
        ]
    elif topic == 2:
        animal, habitat, food = pick(rng, L["animals"])
        art_cap = animal[0].upper() + animal[1:]
        opts = [
            f"{art_cap} est un animal {pick(rng, L['adj_size'])} que l'on trouve dans {habitat}.",
            f"Il se nourrit principalement {food}.",
            f"Les adultes mesurent environ {rng.randrange(5, 120)} centimètres.",
            f"Cet animal est surtout actif {pick(rng, ['la nuit', 'à l’aube', 'au crépuscule', 'en milieu de journée'])}.",
            f"Ses effectifs ont {pick(rng, ['diminué', 'augmenté', 'peu varié'])} depuis {rng.randrange(1950, 2015)}.",
            f"La femelle a généralement {rng.randrange(2, 9)} petits par an.",
            f"Dans certaines régions, l'espèce est protégée par la loi.",
        ]
    elif topic == 3:
        town = place_name(rng, L["place"])
        club = f"{pick(rng, L['clubs'])} de {town}"
        sport = pick(rng, L["sports"])
        founded = rng.randrange(1860, 1990)
        opts = [
            f"L'{club[0].lower()}{club[1:]} est un club de {sport} basé à {town}." if club[0] in "OUA"
            else f"Le {club} est un club de {sport} basé à {town}.",
            f"Le club a été fondé en {founded} par un groupe d'ouvriers de la ville.",
            f"Son stade peut accueillir {fmt_int(rng.randrange(800, 40_000), ' ')} spectateurs.",
            f"Le club remporte la coupe régionale en {founded + rng.randrange(5, 100)}.",
            f"L'équipe joue en {pick(rng, ['rouge et blanc', 'bleu', 'vert et or', 'noir et blanc'])}.",
            f"Son grand rival est le club voisin de {place_name(rng, L['place'])}.",
        ]
    else:
        river = place_name(rng, L["place"])
        opts = [
            f"La {river} est une rivière qui coule {pick(rng, L['countries'])[1]}.",
            f"Elle mesure {rng.randrange(12, 400)} kilomètres et se jette dans {pick(rng, ['la Manche', 'l’océan Atlantique', 'la mer du Nord', 'la Méditerranée'])}.",
            f"Sa source se trouve dans les collines au-dessus de {place_name(rng, L['place'])}.",
            f"Depuis le {pick(rng, ['douzième', 'quinzième', 'dix-septième', 'dix-huitième'])} siècle, la rivière fait tourner des moulins.",
            f"Plusieurs ponts franchissent la {river}, dont le plus ancien date de {rng.randrange(1100, 1800)}.",
            f"La vallée attire de nombreux randonneurs et pêcheurs.",
        ]
    return " ".join([opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4)))


# ---------------------------------------------------------------------------
# German

DE = {
    "place": {
        "pre": ["alt", "neu", "bad", "ober", "unter", "hohen", "kirch", "wald", "stein", "rosen",
                "lichten", "brunn", "eichen", "hasel", "mühl", "weiß", "schön", "grün"],
        "mid": ["en", "er", "ing", "lin"],
        "suf": ["berg", "dorf", "hausen", "heim", "stadt", "burg", "feld", "bach", "au", "tal", "ingen", "brück"],
    },
    "first_m": ["Johann", "Friedrich", "Karl", "Heinrich", "Wilhelm", "Ludwig", "Otto", "Hermann",
                "Ernst", "Georg", "Walter", "Kurt", "Gustav", "Matthias", "Werner", "Klaus", "Jürgen"],
    "first_f": ["Anna", "Maria", "Elisabeth", "Margarete", "Gertrud", "Hildegard", "Ursula", "Ingrid",
                "Charlotte", "Luise", "Katharina", "Helene", "Sophie", "Irmgard", "Renate", "Hedwig"],
    "last": ["Müller", "Schmidt", "Schneider", "Fischer", "Weber", "Becker", "Hoffmann", "Schäfer",
             "Koch", "Richter", "Wagner", "Neumann", "Schwarz", "Zimmermann", "Krüger", "Hartmann"],
    "countries": [("Deutschland", "in Deutschland"), ("Österreich", "in Österreich"),
                  ("die Schweiz", "in der Schweiz"), ("Liechtenstein", "in Liechtenstein"),
                  ("Bayern", "in Bayern"), ("Sachsen", "in Sachsen"), ("Tirol", "in Tirol"),
                  ("Westfalen", "in Westfalen")],
    "professions": [("Physiker", "Physikerin"), ("Maler", "Malerin"), ("Schriftsteller", "Schriftstellerin"),
                    ("Komponist", "Komponistin"), ("Architekt", "Architektin"), ("Ingenieur", "Ingenieurin"),
                    ("Botaniker", "Botanikerin"), ("Politiker", "Politikerin"), ("Dichter", "Dichterin"),
                    ("Mathematiker", "Mathematikerin"), ("Schauspieler", "Schauspielerin"),
                    ("Historiker", "Historikerin"), ("Fotograf", "Fotografin"), ("Chirurg", "Chirurgin")],
    "works": ["eine Studie über Licht und Farbe", "mehrere Romane über das Leben auf dem Land",
              "eine Sinfonie in vier Sätzen", "den Entwurf des Rathauses", "eine Abhandlung zur Zahlentheorie",
              "eine Sammlung kurzer Gedichte", "eine Geschichte der örtlichen Eisenbahn",
              "ein Verfahren zur Messung der Bodenfeuchte", "eine Reihe von Bildnissen",
              "einen Aufsatz über die öffentliche Bildung", "eine neue Art von Hängebrücke",
              "einen Katalog der Alpenblumen"],
    "features": ["seinen gotischen Dom", "eine große Markthalle", "die alte Steinbrücke",
                 "sein jährliches Musikfest", "einen belebten Hafen", "die Universitätsbibliothek",
                 "weitläufige Parkanlagen", "ein Textilmuseum", "die Ruine einer mittelalterlichen Burg",
                 "seinen Bahnhof aus dem neunzehnten Jahrhundert"],
    "industries": ["der Fischerei", "dem Wollhandel", "dem Schiffbau", "dem Weinbau", "dem Bergbau",
                   "der Landwirtschaft", "dem Fremdenverkehr", "dem Buchdruck", "der Glasherstellung",
                   "der Softwareentwicklung"],
    "animals": [("Der Rotfuchs", "in Wäldern und auf Feldern", "kleinen Säugetieren und Beeren"),
                ("Die Schleiereule", "auf offenen Feldern und in alten Scheunen", "Mäusen und Wühlmäusen"),
                ("Der Grasfrosch", "an Teichen und feuchten Wiesen", "Insekten und Würmern"),
                ("Der Graureiher", "an Flüssen und Seen", "Fischen und Fröschen"),
                ("Der Dachs", "an Waldrändern", "Regenwürmern und Wurzeln"),
                ("Der Fischotter", "an sauberen Flüssen", "Fischen und Krebsen"),
                ("Der Igel", "in Gärten und Hecken", "Käfern und Schnecken"),
                ("Das Eichhörnchen", "in Nadelwäldern", "Samen und Nüssen"),
                ("Die Bachforelle", "in kalten Bächen", "Insektenlarven"),
                ("Die Feldlerche", "im Grasland", "Samen und Insekten")],
    "adj_size": ["kleines", "mittelgroßes", "großes", "schlankes", "kräftiges"],
    "clubs": ["FC", "SV", "TSV", "VfB", "SC", "Eintracht"],
    "sports": ["Fußball", "Handball", "Eishockey", "Rugby"],
    "events": ["ein großes Hochwasser", "einen Brand in der Altstadt", "einen langen Streik im Hafen",
               "die Eröffnung der ersten Eisenbahnlinie", "einen königlichen Besuch", "einen sehr harten Winter",
               "die Gründung des Stadtrats", "eine Choleraepidemie"],
}


def de_doc(rng: random.Random) -> str:
    L = DE
    topic = rng.randrange(5)
    if topic == 0:
        city = place_name(rng, L["place"])
        river = place_name(rng, L["place"])
        pop = rng.randrange(800, 900_000)
        year = rng.randrange(900, 1900)
        _, in_country = pick(rng, L["countries"])
        opts = [
            f"{city} ist eine Stadt {in_country} mit {fmt_int(pop, '.')} Einwohnern.",
            f"Die Stadt liegt an der {river}, etwa {rng.randrange(3, 140)} Kilometer von der Küste entfernt.",
            f"Sie wurde im Jahr {year} erstmals urkundlich erwähnt.",
            f"{city} ist bekannt für {pick(rng, L['features'])}.",
            f"Im neunzehnten Jahrhundert lebte die örtliche Wirtschaft vor allem von {pick(rng, L['industries'])}.",
            f"Im Jahr {year + rng.randrange(50, 400)} erlebte die Stadt {pick(rng, L['events'])}.",
            f"Heute arbeiten viele Einwohner im Dienstleistungsbereich oder im nahen {place_name(rng, L['place'])}.",
            f"Zwischen 1950 und 2011 wuchs die Bevölkerung um {rng.randrange(2, 40)} Prozent.",
        ]
    elif topic == 1:
        female = rng.random() < 0.5
        first = pick(rng, L["first_f"] if female else L["first_m"])
        name = f"{first} {pick(rng, L['last'])}"
        prof = pick(rng, L["professions"])[1 if female else 0]
        born = rng.randrange(1700, 1990)
        died = born + rng.randrange(30, 95)
        city = place_name(rng, L["place"])
        pron = "sie" if female else "er"
        art = "eine" if female else "ein"
        nat = pick(rng, ["deutsche", "österreichische", "Schweizer"])
        nat = nat if nat == "Schweizer" or female else nat + "r"
        opts = [
            f"{name} ({born} bis {died}) war {art} {nat} {prof}." if died < 2024
            else f"{name} (geboren {born}) ist {art} {nat} {prof}.",
            f"{pron.capitalize()} wurde in {city} geboren und studierte in {place_name(rng, L['place'])}.",
            f"Bekannt wurde {pron} vor allem durch {pick(rng, L['works'])}.",
            f"Im Jahr {born + rng.randrange(20, 40)} zog {pron} {pick(rng, ['nach Berlin', 'nach Wien', 'nach Zürich', 'nach München', 'nach Hamburg'])}, wo {pron} den größten Teil der Laufbahn verbrachte.",
            f"Die frühen Werke fanden wenig Beachtung, wurden aber später von der Kritik gelobt.",
            f"{pron.capitalize()} wurde im Jahr {born + rng.randrange(35, 60)} in die Akademie gewählt.",
            f"In {city} ist heute eine Straße nach {'ihr' if female else 'ihm'} benannt.",
        ]
    elif topic == 2:
        animal, habitat, food = pick(rng, L["animals"])
        opts = [
            f"{animal} ist ein {pick(rng, L['adj_size'])} Tier, das {habitat} vorkommt.",
            f"Es ernährt sich hauptsächlich von {food}.",
            f"Ausgewachsene Tiere werden etwa {rng.randrange(5, 120)} Zentimeter lang.",
            f"Das Tier ist vor allem {pick(rng, ['nachts', 'in der Morgendämmerung', 'in der Abenddämmerung', 'um die Mittagszeit'])} aktiv.",
            f"Der Bestand hat seit {rng.randrange(1950, 2015)} {pick(rng, ['abgenommen', 'zugenommen', 'sich kaum verändert'])}.",
            f"Das Weibchen bringt jedes Jahr meist {rng.randrange(2, 9)} Junge zur Welt.",
            f"In manchen Gegenden steht die Art unter Naturschutz.",
        ]
    elif topic == 3:
        town = place_name(rng, L["place"])
        club = f"{pick(rng, L['clubs'])} {town}"
        sport = pick(rng, L["sports"])
        founded = rng.randrange(1860, 1990)
        opts = [
            f"Der {club} ist ein {sport}verein aus {town}.",
            f"Der Verein wurde {founded} von einer Gruppe örtlicher Arbeiter gegründet.",
            f"Das Stadion bietet Platz für {fmt_int(rng.randrange(800, 40_000), '.')} Zuschauer.",
            f"Im Jahr {founded + rng.randrange(5, 100)} gewann der Verein den Landespokal.",
            f"Die Mannschaft spielt in den Farben {pick(rng, ['Rot und Weiß', 'Blau', 'Grün und Gold', 'Schwarz und Weiß'])}.",
            f"Der größte Rivale ist der Nachbarverein aus {place_name(rng, L['place'])}.",
        ]
    else:
        river = place_name(rng, L["place"])
        opts = [
            f"Die {river} ist ein Fluss {pick(rng, L['countries'])[1]}.",
            f"Sie ist {rng.randrange(12, 400)} Kilometer lang und mündet in {pick(rng, ['die Nordsee', 'die Ostsee', 'den Rhein', 'die Donau'])}.",
            f"Ihre Quelle liegt in den Hügeln oberhalb von {place_name(rng, L['place'])}.",
            f"Seit dem {pick(rng, ['zwölften', 'fünfzehnten', 'siebzehnten', 'achtzehnten'])} Jahrhundert treibt der Fluss Mühlen an.",
            f"Mehrere Brücken überqueren die {river}, die älteste stammt aus dem Jahr {rng.randrange(1100, 1800)}.",
            f"Das Tal ist bei Wanderern und Anglern beliebt.",
        ]
    return " ".join([opts[0]] + rng.sample(opts[1:], rng.randrange(1, 4)))


# ---------------------------------------------------------------------------
# Python


class _StripDocstrings(ast.NodeTransformer):
    def _strip(self, node):
        self.generic_visit(node)
        body = node.body
        if body and isinstance(body[0], ast.Expr) and isinstance(getattr(body[0], "value", None), ast.Constant) \
                and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
        return node

    visit_FunctionDef = visit_AsyncFunctionDef = visit_ClassDef = _strip


def py_docs(rng: random.Random, n: int, max_lines: int = 14, max_bytes: int = 700) -> list[str]:
    libdir = Path(sysconfig.get_paths()["stdlib"])
    files = sorted(p for p in libdir.rglob("*.py")
                   if not any(part in {"test", "tests", "idlelib", "lib2to3", "site-packages", "dist-packages",
                                       "__pycache__", "turtledemo", "encodings"} for part in p.parts))
    seen: set[str] = set()
    pool: list[str] = []
    for path in files:
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                continue
            node = _StripDocstrings().visit(node)
            node.decorator_list = []
            try:
                src = ast.unparse(node)
            except Exception:
                continue
            if not src.isascii() or src.count("\n") + 1 > max_lines or len(src) > max_bytes or len(src) < 40:
                continue
            if src in seen:
                continue
            seen.add(src)
            pool.append(src)
    if len(pool) < n:
        raise SystemExit(f"only {len(pool)} python functions available, need {n}")
    return rng.sample(pool, n)


# ---------------------------------------------------------------------------


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--docs", type=int, default=8000, help="documents per language")
    ap.add_argument("--seed", type=int, default=20240710)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    gens = {"en": en_doc, "fr": fr_doc, "de": de_doc}
    for i, lang in enumerate(["en", "fr", "de", "py"]):
        rng = random.Random(args.seed * 10 + i)
        if lang == "py":
            texts = py_docs(rng, args.docs)
        else:
            texts, seen = [], set()
            while len(texts) < args.docs:
                t = gens[lang](rng)
                if t not in seen:
                    seen.add(t)
                    texts.append(t)
        path = args.out / f"{lang}.jsonl.gz"
        # mtime=0 keeps the gzip bytes reproducible
        with gzip.GzipFile(path, "wb", mtime=0) as raw:
            for t in texts:
                raw.write((json.dumps({"text": t, "lang": lang}, ensure_ascii=False) + "\n").encode("utf-8"))
        nbytes = sum(len(t.encode()) for t in texts)
        print(f"{lang}: {len(texts)} docs, {nbytes} bytes -> {path}", file=sys.stderr)


if __name__ == "__main__":
    main()
